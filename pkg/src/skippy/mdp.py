"""Exact finite-horizon MDP machinery.

Stages are indexed from 0 internally: stage ``h`` in ``0..H-1`` is a decision
stage and stage ``H`` holds the single terminal state.  Stage 0 holds the
single start state.  Within a stage, states are identified by their local
index; ``StagedMdp.global_id`` maps to the file-level ids.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import InvalidInputError

ROW_TOL = 1e-12
DP_TOL = 1e-9


def _as_tables(tables, name):
    out = tuple(np.ascontiguousarray(t, dtype=np.float64) for t in tables)
    for t in out:
        t.setflags(write=False)
    if not out:
        raise InvalidInputError(f"{name}: empty")
    return out


@dataclass(frozen=True, eq=False)
class StagedMdp:
    """Stage-partitioned finite MDP.

    ``transitions[h]`` has shape ``(n_h, A, n_{h+1})`` for ``h < H``;
    ``rewards[h]`` has shape ``(n_h, A)`` for ``h <= H`` and holds mean rewards.
    """

    transitions: tuple
    rewards: tuple
    reward_kind: str = "deterministic"

    def __post_init__(self):
        P = _as_tables(self.transitions, "transitions")
        r = _as_tables(self.rewards, "rewards")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        H = len(P)
        if len(r) != H + 1:
            raise InvalidInputError("rewards must cover stages 0..H")
        if self.reward_kind not in ("deterministic", "bernoulli"):
            raise InvalidInputError(f"unknown reward kind {self.reward_kind!r}")
        A = r[0].shape[1]
        if r[0].shape[0] != 1:
            raise InvalidInputError("stage 0 must hold a single start state")
        if r[H].shape[0] != 1:
            raise InvalidInputError("stage H must hold a single terminal state")
        for h in range(H):
            n_h, n_next = r[h].shape[0], r[h + 1].shape[0]
            if P[h].shape != (n_h, A, n_next):
                raise InvalidInputError(
                    f"stage {h}: transition shape {P[h].shape} != {(n_h, A, n_next)}"
                )
            if np.any(P[h] < 0) or np.any(np.abs(P[h].sum(axis=2) - 1.0) > ROW_TOL):
                raise InvalidInputError(f"stage {h}: transition rows must be distributions")
        for h, t in enumerate(r):
            if t.ndim != 2 or t.shape[1] != A:
                raise InvalidInputError(f"stage {h}: reward table has wrong shape")
            if np.any(t < 0) or np.any(t > 1):
                raise InvalidInputError(f"stage {h}: reward means must lie in [0, 1]")
        if np.any(r[H] != 0):
            raise InvalidInputError("terminal rewards must be zero")

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def num_actions(self) -> int:
        return self.rewards[0].shape[1]

    @property
    def stage_sizes(self) -> tuple:
        return tuple(t.shape[0] for t in self.rewards)

    @cached_property
    def _offsets(self):
        return np.concatenate([[0], np.cumsum(self.stage_sizes)])

    def global_id(self, h: int, s: int) -> int:
        return int(self._offsets[h] + s)

    def local_id(self, state_id: int) -> tuple[int, int]:
        h = int(np.searchsorted(self._offsets, state_id, side="right") - 1)
        return h, int(state_id - self._offsets[h])

    def state_ids(self, h: int) -> list[int]:
        return list(range(int(self._offsets[h]), int(self._offsets[h + 1])))

    @cached_property
    def padded(self):
        """``(sizes, r, P)`` zero-padded to a common stage width for the kernels."""
        sizes = self.stage_sizes
        N, A, H = max(sizes), self.num_actions, self.horizon
        r = np.zeros((H + 1, N, A))
        P = np.zeros((H, N, A, N))
        for h in range(H + 1):
            r[h, : sizes[h]] = self.rewards[h]
        for h in range(H):
            P[h, : sizes[h], :, : sizes[h + 1]] = self.transitions[h]
        return sizes, r, P

    def with_rewards(self, rewards) -> "StagedMdp":
        return StagedMdp(self.transitions, tuple(rewards), self.reward_kind)

    def num_deterministic_policies(self) -> int:
        return self.num_actions ** sum(self.stage_sizes[:-1])


@dataclass(frozen=True, eq=False)
class Policy:
    """Memoryless policy: ``probs[h]`` has shape ``(n_h, A)`` for ``h <= H``."""

    probs: tuple

    def __post_init__(self):
        probs = _as_tables(self.probs, "policy")
        for h, p in enumerate(probs):
            if np.any(p < -ROW_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL):
                raise InvalidInputError(f"policy stage {h}: rows must be distributions")
        object.__setattr__(self, "probs", probs)

    @property
    def deterministic(self) -> bool:
        return all(np.all(np.isclose(p.max(axis=1), 1.0, atol=ROW_TOL)) for p in self.probs)

    def check_against(self, mdp: StagedMdp) -> None:
        if len(self.probs) != mdp.horizon + 1 or any(
            p.shape != r.shape for p, r in zip(self.probs, mdp.rewards)
        ):
            raise InvalidInputError("policy stages do not match the MDP")

    @classmethod
    def uniform(cls, mdp: StagedMdp) -> "Policy":
        A = mdp.num_actions
        return cls(tuple(np.full((n, A), 1.0 / A) for n in mdp.stage_sizes))

    @classmethod
    def from_actions(cls, mdp: StagedMdp, actions) -> "Policy":
        """Deterministic policy; ``actions[h][s]`` is the chosen action (terminal stage optional)."""
        A = mdp.num_actions
        probs = []
        for h, n in enumerate(mdp.stage_sizes):
            row = np.zeros((n, A))
            acts = actions[h] if h < len(actions) else np.zeros(n, dtype=int)
            row[np.arange(n), np.asarray(acts, dtype=int)] = 1.0
            probs.append(row)
        return cls(tuple(probs))

    @classmethod
    def random(cls, mdp: StagedMdp, rng: np.random.Generator, deterministic=False) -> "Policy":
        A = mdp.num_actions
        if deterministic:
            return cls.from_actions(mdp, [rng.integers(A, size=n) for n in mdp.stage_sizes])
        return cls(tuple(rng.dirichlet(np.ones(A), size=n) for n in mdp.stage_sizes))

    def digest(self) -> str:
        payload = json.dumps([p.tolist() for p in self.probs], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Trajectory:
    """Steps ``(state_id, action, reward)`` for stages 0..H."""

    steps: tuple


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` trajectories stored column-wise; states are local indices per stage."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior: Policy
    seed: int
    start: int = 0

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise InvalidInputError("dataset needs at least one trajectory")
        if self.states.shape != self.actions.shape or self.states.shape != self.rewards.shape:
            raise InvalidInputError("dataset columns disagree in shape")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    def trajectory(self, j: int, mdp: StagedMdp | None = None) -> Trajectory:
        ids = self.states[j] if mdp is None else [mdp.global_id(h, s) for h, s in enumerate(self.states[j])]
        return Trajectory(
            tuple((int(s), int(a), float(r)) for s, a, r in zip(ids, self.actions[j], self.rewards[j]))
        )

    def head(self, n: int) -> "Dataset":
        return Dataset(self.states[:n], self.actions[:n], self.rewards[:n], self.behavior, self.seed, self.start)


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    """Per-stage state-action marginals ``tables[h]`` of shape ``(n_h, A)``."""

    tables: tuple
    policy_digest: str = field(default="")

    def state_marginal(self, h: int) -> np.ndarray:
        return self.tables[h].sum(axis=1)


def backward_q(mdp: StagedMdp, pi: Policy):
    """Exact ``q^pi`` and ``v^pi`` tables per stage (terminal stage zero)."""
    pi.check_against(mdp)
    H = mdp.horizon
    q = [None] * (H + 1)
    v = [None] * (H + 1)
    q[H] = np.zeros_like(mdp.rewards[H])
    v[H] = np.zeros(mdp.stage_sizes[H])
    for h in range(H - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.transitions[h] @ v[h + 1]
        v[h] = np.einsum("sa,sa->s", pi.probs[h], q[h])
    return q, v


def optimal_q(mdp: StagedMdp):
    """``q*``, ``v*`` and a greedy optimal policy (ties to the lowest action)."""
    H = mdp.horizon
    q = [None] * (H + 1)
    v = [None] * (H + 1)
    acts = [None] * (H + 1)
    q[H] = np.zeros_like(mdp.rewards[H])
    v[H] = np.zeros(mdp.stage_sizes[H])
    acts[H] = np.zeros(1, dtype=int)
    for h in range(H - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.transitions[h] @ v[h + 1]
        acts[h] = np.argmax(q[h], axis=1)
        v[h] = q[h].max(axis=1)
    return q, v, Policy.from_actions(mdp, acts)


def value(mdp: StagedMdp, pi: Policy) -> float:
    return float(backward_q(mdp, pi)[1][0][0])


def occupancy(mdp: StagedMdp, pi: Policy) -> OccupancyMeasure:
    pi.check_against(mdp)
    state = np.ones(1)
    tables = []
    for h in range(mdp.horizon + 1):
        sa = state[:, None] * pi.probs[h]
        tables.append(sa)
        if h < mdp.horizon:
            state = np.einsum("sa,san->n", sa, mdp.transitions[h])
    return OccupancyMeasure(tuple(tables), pi.digest())


def _cdf_rows(p: np.ndarray) -> np.ndarray:
    # cumulative rows; entries at or after the last positive mass become 2.0
    cdf = np.cumsum(p, axis=-1)
    last = p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)
    cols = np.arange(p.shape[-1])
    cdf[cols >= last[..., None]] = 2.0
    return cdf


def _sampling_tables(mdp: StagedMdp, pi: Policy):
    sizes, rmean, P = mdp.padded
    H, N, A = mdp.horizon, max(sizes), mdp.num_actions
    pi_cdf = np.full((H + 1, N, A), 2.0)
    for h, p in enumerate(pi.probs):
        pi_cdf[h, : sizes[h]] = _cdf_rows(p)
    p_cdf = np.full((H, N, A, N), 2.0)
    for h in range(H):
        p_cdf[h, : sizes[h], :, : sizes[h + 1]] = _cdf_rows(mdp.transitions[h])
    return sizes, pi_cdf, p_cdf, rmean


SAMPLE_CHUNK = 4096


def sample_dataset(mdp: StagedMdp, behavior: Policy, n: int, seed: int, start: int = 0, impl=None, workers=1) -> Dataset:
    """Draw trajectories ``start .. start+n-1`` of the counter-based stream ``seed``.

    Trajectory ``j`` depends only on ``(seed, j)``, so chunking and worker
    count never change the result.
    """
    behavior.check_against(mdp)
    if n < 1:
        raise InvalidInputError("n must be positive")
    sizes, pi_cdf, p_cdf, rmean = _sampling_tables(mdp, behavior)
    bern = mdp.reward_kind == "bernoulli"
    chunks = [(lo, min(SAMPLE_CHUNK, n - lo)) for lo in range(0, n, SAMPLE_CHUNK)]

    def run(chunk):
        lo, count = chunk
        return kernels.sample_batch(seed, start + lo, count, sizes, pi_cdf, p_cdf, rmean, bern, impl=impl)

    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    states, actions, rewards = (np.concatenate(col) for col in zip(*parts))
    return Dataset(states, actions, rewards, behavior, int(seed), int(start))


def sample_trajectory(mdp: StagedMdp, pi: Policy, seed: int, index: int, impl=None) -> Trajectory:
    ds = sample_dataset(mdp, pi, 1, seed, start=index, impl=impl)
    return ds.trajectory(0, mdp)


def max_reach(mdp: StagedMdp):
    """``reach[h][s]``: largest probability over policies of visiting ``s`` at stage ``h``."""
    H = mdp.horizon
    reach = [np.ones(1)]
    for h in range(1, H + 1):
        W = np.eye(mdp.stage_sizes[h])
        for u in range(h - 1, -1, -1):
            W = np.max(mdp.transitions[u] @ W, axis=1)
        reach.append(W[0])
    return reach


def concentrability(mdp: StagedMdp, behavior: Policy, method: str = "dp") -> float:
    """Exact max over deterministic policies of ``nu_h(s,a) / mu_h(s,a)``, ``h < H``.

    ``method="dp"`` maximises the reach probability of each state by backward
    induction (a deterministic policy can then pick any action at that state);
    ``method="enumerate"`` scans every deterministic policy.  Returns ``inf``
    when some reachable pair has zero behavior mass.
    """
    mu = occupancy(mdp, behavior).tables
    H = mdp.horizon
    if method == "dp":
        reach = max_reach(mdp)
        best = 0.0
        for h in range(H):
            nu = np.broadcast_to(reach[h][:, None], mu[h].shape)
            best = max(best, _max_ratio(nu, mu[h]))
        return best
    if method != "enumerate":
        raise ValueError(f"unknown method {method!r}")
    best = 0.0
    for pi in iter_deterministic_policies(mdp):
        nu = occupancy(mdp, pi).tables
        for h in range(H):
            best = max(best, _max_ratio(nu[h], mu[h]))
    return best


def _max_ratio(nu, mu):
    pos = nu > DP_TOL * 1e-3
    if np.any(mu[pos] <= 0):
        return float("inf")
    if not np.any(pos):
        return 0.0
    return float(np.max(nu[pos] / mu[pos]))


def iter_deterministic_policies(mdp: StagedMdp, limit: int = kernels.MAX_POLICIES):
    count = mdp.num_deterministic_policies()
    if count > limit:
        raise InvalidInputError(f"{count} deterministic policies exceed the enumeration cap {limit}")
    sizes = mdp.stage_sizes[:-1]
    A = mdp.num_actions
    for flat in itertools.product(range(A), repeat=sum(sizes)):
        acts, i = [], 0
        for n in sizes:
            acts.append(flat[i : i + n])
            i += n
        yield Policy.from_actions(mdp, acts)


def performance_difference(mdp: StagedMdp, pi: Policy, pi_bar: Policy) -> float:
    """Residual of the performance-difference identity, computed exactly."""
    _, v = backward_q(mdp, pi)
    q_bar, v_bar = backward_q(mdp, pi_bar)
    nu = occupancy(mdp, pi).tables
    total = 0.0
    for h in range(mdp.horizon):
        total += float(np.sum(nu[h] * (q_bar[h] - v_bar[h][:, None])))
    return abs(v[0][0] - v_bar[0][0] - total)


def change_of_measure_slack(mdp: StagedMdp, behavior: Policy, target: Policy, f, cstar: float) -> float:
    """``max_h E_nu f - C* E_mu f`` for nonnegative ``f[h]`` of shape ``(n_h, A)``."""
    mu = occupancy(mdp, behavior).tables
    nu = occupancy(mdp, target).tables
    return max(float(np.sum(nu[h] * f[h]) - cstar * np.sum(mu[h] * f[h])) for h in range(mdp.horizon))
