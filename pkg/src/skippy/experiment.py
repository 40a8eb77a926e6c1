"""Run configuration, single learner runs and deterministic sweeps."""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyFilterError, InvalidInputError
from .features import Modification, true_modification
from .instances import Instance, InstanceSpec, generate, up_policy
from .learners import CandidateFamily, LearnerConfig, build_family, eval_learner, opt_learner, population_recursion, worker_count
from .mdp import Policy, concentrability, optimal_q, sample_dataset, value
from .profiles import profile
from .regression import Multipliers, min_samples

CSV_COLUMNS = (
    "n", "seed", "mode", "status", "value", "oracle", "error", "accepted", "chosen", "sub_threshold",
    "alpha", "lambda", "beta", "eps_bar", "zeta1", "zeta2", "eps_tilde", "alpha_tilde", "cstar",
)


@dataclass(frozen=True)
class RunConfig:
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    mode: str = "eval"
    n: int = 1024
    seed: int = 0
    alpha: float | None = None
    delta: float = 0.1
    eps: float = 0.1
    profile: str = "desk"
    multipliers: Multipliers | None = None
    set_mode: str = "propagated"
    target: str = "up"
    family: str = "oracle,perturbed,random:2,sentinel"
    family_seed: int = 0
    exact_targets: bool = False

    def __post_init__(self):
        if self.mode not in ("eval", "opt"):
            raise ConfigError(f"mode must be eval or opt, not {self.mode!r}")
        if self.n < 1:
            raise ConfigError("n must be positive")

    @property
    def resolved_multipliers(self) -> Multipliers:
        if self.multipliers is not None:
            return self.multipliers
        try:
            return profile(self.profile)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["multipliers"] = dataclasses.asdict(self.resolved_multipliers)
        return out


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known - {"sweep"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.pop("sweep", None)
    try:
        if "instance" in data:
            data["instance"] = InstanceSpec(**data["instance"])
        if data.get("multipliers") is not None:
            data["multipliers"] = Multipliers(**data["multipliers"])
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path) -> tuple:
    """``(RunConfig, sweep section or {})`` from a JSON file."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data), data.get("sweep", {})


@lru_cache(maxsize=32)
def _instance(spec: InstanceSpec) -> Instance:
    return generate(spec)


@lru_cache(maxsize=32)
def _oracle(spec: InstanceSpec, alpha: float):
    inst = _instance(spec)
    G, report = true_modification(inst.mdp, inst.features, alpha)
    return G, report, concentrability(inst.mdp, inst.behavior)


def target_policy(name: str, inst: Instance) -> Policy:
    mdp = inst.mdp
    if name == "up":
        return up_policy(mdp)
    if name == "uniform":
        return Policy.uniform(mdp)
    if name == "optimal":
        return optimal_q(mdp)[2]
    if name.startswith("random:"):
        return Policy.random(mdp, np.random.default_rng(int(name.split(":", 1)[1])))
    if name.startswith("file:"):
        from .io import policy_from_dict, read_json

        return policy_from_dict(read_json(name[5:]), mdp)
    raise ConfigError(f"unknown target policy {name!r}")


def parse_family(spec: str, oracle: Modification, L2: float, dim: int, horizon: int, alpha: float, seed: int) -> CandidateFamily:
    """Comma-separated tokens: ``oracle``, ``perturbed[:s1/s2..]``, ``random[:k]``, ``sentinel``, ``file:PATH``."""
    mods = []
    rng_seed = seed
    for token in [t.strip() for t in spec.split(",") if t.strip()]:
        name, _, arg = token.partition(":")
        if name == "oracle":
            mods.append(oracle)
        elif name == "perturbed":
            scales = tuple(float(x) for x in arg.split("/")) if arg else (0.1, 0.5, 1.0)
            fam = build_family(oracle, L2, dim, horizon, alpha, seed=rng_seed, scales=scales, n_random=0, sentinel=False)
            mods.extend(fam.modifications[1:])
        elif name == "random":
            k = int(arg) if arg else 1
            fam = build_family(oracle, L2, dim, horizon, alpha, seed=rng_seed + 7919, scales=(), n_random=k, sentinel=False)
            mods.extend(fam.modifications[1:])
        elif name == "sentinel":
            mods.append(Modification.sentinel(alpha, horizon, dim))
        elif name == "file":
            from .io import modification_from_file

            G = modification_from_file(arg, dim)
            if G.alpha != alpha:
                G = Modification(alpha, G.per_stage, G.no_skip, G.tag)
            mods.append(G)
        else:
            raise ConfigError(f"unknown family token {token!r}")
        rng_seed += 1
    if not mods:
        raise ConfigError("family spec selects no modifications")
    return CandidateFamily(tuple(mods))


def prepare(cfg: RunConfig):
    """Instance, oracle modification, concentrability, learner config and family for a run."""
    inst = _instance(cfg.instance)
    H, d = inst.mdp.horizon, inst.features.dim
    probe = LearnerConfig(L2=inst.L2, cstar=1.0, alpha=cfg.alpha)
    if cfg.alpha is None:
        cstar = concentrability(inst.mdp, inst.behavior)
        alpha = LearnerConfig(L2=inst.L2, cstar=cstar).resolve_alpha(cfg.mode, H, d, cfg.n)
    else:
        alpha = probe.resolve_alpha(cfg.mode, H, d, cfg.n)
    G, report, cstar = _oracle(cfg.instance, alpha)
    lcfg = LearnerConfig(
        L2=inst.L2,
        cstar=cstar,
        delta=cfg.delta,
        eps=cfg.eps,
        alpha=alpha,
        multipliers=cfg.resolved_multipliers,
        set_mode=cfg.set_mode,
        pi_e=target_policy(cfg.target, inst) if cfg.mode == "eval" else None,
        pi_b=inst.behavior,
    )
    family = parse_family(cfg.family, G, inst.L2, d, H, alpha, cfg.family_seed)
    return inst, G, report, lcfg, family


def run_once(cfg: RunConfig, with_manifest: bool = False) -> dict:
    """One learner run; returns a CSV-ready row (and the learner manifest on request)."""
    t0 = time.perf_counter()
    inst, G, _, lcfg, family = prepare(cfg)
    mdp = inst.mdp
    row = {"n": cfg.n, "seed": cfg.seed, "mode": cfg.mode}
    need = min_samples(inst.features.norm_bound, inst.features.dim, mdp.horizon, cfg.delta)
    row["sub_threshold"] = int(cfg.n < need)
    oracle = value(mdp, lcfg.pi_e) if cfg.mode == "eval" else float(optimal_q(mdp)[1][0][0])
    row["oracle"] = oracle
    consts = lcfg.constants(cfg.mode, inst.features, mdp.horizon, mdp.num_actions, cfg.n)
    row.update(
        alpha=consts.alpha, **{"lambda": consts.lam}, beta=consts.beta, eps_bar=consts.eps_bar, zeta1=consts.zeta1,
        zeta2=consts.zeta2, eps_tilde=consts.eps_tilde, alpha_tilde=consts.alpha_tilde, cstar=consts.cstar,
    )
    manifest = None
    if cfg.exact_targets:
        _, q, start = population_recursion(mdp, inst.features, family.modifications[0], cfg.mode, inst.behavior, lcfg.pi_e)
        if cfg.mode == "eval":
            est = start
        else:
            A = mdp.num_actions
            est = value(mdp, Policy(tuple(np.eye(A)[np.argmax(t, axis=1)] for t in q)))
        row.update(status="ok", value=est, accepted=1, chosen=family.modifications[0].tag)
        row["error"] = abs(est - oracle) if cfg.mode == "eval" else oracle - est
    else:
        ds = sample_dataset(mdp, inst.behavior, cfg.n, cfg.seed)
        try:
            learner = eval_learner if cfg.mode == "eval" else opt_learner
            res = learner(ds, inst.features, lcfg, family)
        except EmptyFilterError as exc:
            row.update(status="empty-filter", value=math.nan, error=math.nan, accepted=0, chosen="")
            if with_manifest:
                return {"row": row, "manifest": {"error": str(exc), "worst_widths": exc.worst_widths}}
            return row
        if cfg.mode == "eval":
            row["value"] = res.value
            row["error"] = abs(res.value - oracle)
        else:
            achieved = value(mdp, res.policy)
            row["value"] = achieved
            row["error"] = oracle - achieved
        row.update(status="ok", accepted=len(res.accepted), chosen=res.recursion.modification.tag)
        manifest = res.manifest()
    if with_manifest:
        manifest = dict(manifest or {})
        manifest.update(config=cfg.as_dict(), seed=cfg.seed, oracle=oracle, wall_time=time.perf_counter() - t0)
        if cfg.mode == "opt" and not cfg.exact_targets:
            manifest["policy_actions"] = [np.argmax(p, axis=1).tolist() for p in res.policy.probs]
        return {"row": row, "manifest": manifest}
    return row


@dataclass(frozen=True)
class SweepPlan:
    base: RunConfig
    n_grid: tuple = ()
    seeds: int = 5
    seed_offset: int = 0

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if list(grid) != sorted(grid):
            raise ConfigError("n grid must be ascending")
        object.__setattr__(self, "n_grid", grid)


def plan_from_dict(base: RunConfig, sweep: dict) -> SweepPlan:
    return SweepPlan(base, tuple(sweep.get("n_grid", ())), int(sweep.get("seeds", 5)), int(sweep.get("seed_offset", 0)))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_sweep(plan: SweepPlan, workers: int | None = None) -> list:
    """Rows ordered by ``(n, seed)``; a failing row is recorded and the sweep continues."""
    jobs = [
        plan.base.with_overrides(n=n, seed=plan.seed_offset + s) for n in plan.n_grid for s in range(plan.seeds)
    ]
    if jobs:
        prepare(jobs[0])  # warm the instance and oracle caches before fanning out

    def job(cfg):
        try:
            return run_once(cfg)
        except (InvalidInputError, ConfigError, ValueError, np.linalg.LinAlgError) as exc:
            row = {c: "" for c in CSV_COLUMNS}
            row.update(n=cfg.n, seed=cfg.seed, mode=cfg.mode, status=f"error: {exc}")
            return row

    workers = worker_count(workers)
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, jobs))
    return [job(c) for c in jobs]


def rows_to_csv(rows) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in CSV_COLUMNS])
    return buf.getvalue()


def sweep_manifest(plan: SweepPlan, rows) -> dict:
    return {
        "plan": {
            "base": plan.base.as_dict(),
            "n_grid": list(plan.n_grid),
            "seeds": plan.seeds,
            "seed_offset": plan.seed_offset,
        },
        "rows": len(rows),
        "failures": sum(1 for r in rows if r.get("status") != "ok"),
    }
