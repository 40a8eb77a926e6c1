"""File formats: canonical JSON for MDPs, features, policies and modifications; JSONL datasets.

Stage keys in files are 1-based and state ids are global across stages.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .features import FeatureMap, Modification
from .mdp import Dataset, Policy, StagedMdp


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _nested(mdp: StagedMdp, table, stages):
    out = {}
    for h in stages:
        ids = mdp.state_ids(h)
        out[str(h + 1)] = {str(ids[s]): table(h, s) for s in range(len(ids))}
    return out


def mdp_to_dict(mdp: StagedMdp) -> dict:
    H, A = mdp.horizon, mdp.num_actions
    return {
        "horizon": H,
        "stages": [mdp.state_ids(h) for h in range(H + 1)],
        "actions": A,
        "reward_kind": mdp.reward_kind,
        "transitions": _nested(
            mdp, lambda h, s: {str(a): mdp.transitions[h][s, a].tolist() for a in range(A)}, range(H)
        ),
        "rewards": _nested(mdp, lambda h, s: {str(a): float(mdp.rewards[h][s, a]) for a in range(A)}, range(H + 1)),
    }


def _require(data, *keys):
    missing = [k for k in keys if k not in data]
    if missing:
        raise InvalidInputError(f"missing fields: {', '.join(missing)}")


def mdp_from_dict(data: dict) -> StagedMdp:
    _require(data, "horizon", "stages", "actions", "transitions", "rewards")
    H, A = int(data["horizon"]), int(data["actions"])
    stages = data["stages"]
    if len(stages) != H + 1:
        raise InvalidInputError("stages must list H+1 state groups")
    flat = [s for grp in stages for s in grp]
    if flat != list(range(len(flat))):
        raise InvalidInputError("state ids must be 0..|S|-1 listed stage by stage")
    try:
        transitions = []
        for h in range(H):
            rows = data["transitions"][str(h + 1)]
            transitions.append(np.array([[rows[str(s)][str(a)] for a in range(A)] for s in stages[h]], dtype=float))
        rewards = []
        for h in range(H + 1):
            rows = data["rewards"].get(str(h + 1))
            if rows is None and h == H:
                rewards.append(np.zeros((len(stages[h]), A)))
                continue
            rewards.append(np.array([[rows[str(s)][str(a)] for a in range(A)] for s in stages[h]], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed MDP table: {exc}") from exc
    return StagedMdp(tuple(transitions), tuple(rewards), data.get("reward_kind", "deterministic"))


def features_to_dict(mdp: StagedMdp, features: FeatureMap) -> dict:
    A = mdp.num_actions
    return {
        "dim": features.dim,
        "L1": features.norm_bound,
        "phi": _nested(
            mdp, lambda h, s: {str(a): features.phi[h][s, a].tolist() for a in range(A)}, range(mdp.horizon + 1)
        ),
    }


def features_from_dict(data: dict, mdp: StagedMdp) -> FeatureMap:
    _require(data, "dim", "L1", "phi")
    A, d = mdp.num_actions, int(data["dim"])
    phi = []
    try:
        for h in range(mdp.horizon + 1):
            rows = data["phi"][str(h + 1)]
            arr = np.array([[rows[str(s)][str(a)] for a in range(A)] for s in mdp.state_ids(h)], dtype=float)
            phi.append(arr.reshape(len(mdp.state_ids(h)), A, d))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed feature table: {exc}") from exc
    return FeatureMap(tuple(phi), float(data["L1"]))


def policy_to_dict(mdp: StagedMdp, pi: Policy) -> dict:
    return {"probs": _nested(mdp, lambda h, s: pi.probs[h][s].tolist(), range(mdp.horizon + 1))}


def policy_from_dict(data: dict, mdp: StagedMdp) -> Policy:
    _require(data, "probs")
    try:
        probs = [
            np.array([data["probs"][str(h + 1)][str(s)] for s in mdp.state_ids(h)], dtype=float)
            for h in range(mdp.horizon + 1)
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed policy table: {exc}") from exc
    return Policy(tuple(probs))


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def write_dataset(path, dataset: Dataset, mdp: StagedMdp) -> None:
    header = {
        "n": dataset.n,
        "seed": dataset.seed,
        "start": dataset.start,
        "horizon": dataset.horizon,
        "behavior_policy_digest": dataset.behavior.digest(),
    }
    offsets = [mdp.global_id(h, 0) for h in range(mdp.horizon + 1)]
    with open(path, "w") as fh:
        fh.write(canonical_json(header) + "\n")
        for j in range(dataset.n):
            steps = [
                [int(offsets[h] + dataset.states[j, h]), int(dataset.actions[j, h]), float(dataset.rewards[j, h])]
                for h in range(dataset.horizon + 1)
            ]
            fh.write(canonical_json(steps) + "\n")


def read_dataset(path, mdp: StagedMdp, behavior: Policy) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise InvalidInputError("dataset file is empty")
    header = json.loads(lines[0])
    if header.get("behavior_policy_digest") != behavior.digest():
        raise InvalidInputError("dataset was drawn from a different behavior policy")
    rows = [json.loads(line) for line in lines[1:] if line.strip()]
    if len(rows) != header.get("n"):
        raise InvalidInputError("dataset header count does not match its records")
    arr = np.array(rows, dtype=float)
    if arr.ndim != 3 or arr.shape[1] != mdp.horizon + 1:
        raise InvalidInputError("trajectories must cover every stage")
    states = np.empty(arr.shape[:2], dtype=np.int64)
    for h in range(mdp.horizon + 1):
        local = arr[:, h, 0].astype(np.int64) - mdp.global_id(h, 0)
        if np.any(local < 0) or np.any(local >= mdp.stage_sizes[h]):
            raise InvalidInputError(f"trajectory state outside stage {h + 1}")
        states[:, h] = local
    return Dataset(states, arr[:, :, 1].astype(np.int64), arr[:, :, 2], behavior, int(header["seed"]), int(header.get("start", 0)))


def modification_from_file(path, dim: int) -> Modification:
    return Modification.from_dict(read_json(path), dim)
