"""Offline evaluation and optimisation learners over a finite family of modifications."""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyFilterError, InvalidInputError
from .features import FeatureMap, Modification, design_size
from .mdp import Dataset, Policy, StagedMdp, backward_q, occupancy
from .regression import (
    ConfidenceSet,
    Constants,
    Multipliers,
    StageDesignMatrix,
    auto_alpha,
    compute_constants,
    constrained_ls,
    ellipsoid_widths,
)
from .skipping import exact_T_G, exact_T_pi_G, skip_weights

# propagated set terms whose matrix norm falls below this are dropped
PRUNE_TOL = 1e-14


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("SKIPPY_THREADS", "0") or 0)
    n = requested or 1
    return max(1, min(n, cap) if cap > 0 else n)


@dataclass(frozen=True, eq=False)
class CandidateFamily:
    modifications: tuple

    def __post_init__(self):
        if not self.modifications:
            raise InvalidInputError("candidate family is empty")
        alphas = {m.alpha for m in self.modifications}
        if len(alphas) != 1:
            raise InvalidInputError("all modifications in a family must share alpha")

    @property
    def tags(self) -> list:
        return [m.tag for m in self.modifications]

    def __len__(self):
        return len(self.modifications)

    def __iter__(self):
        return iter(self.modifications)


def _project_ball(x, bound):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x * np.minimum(1.0, bound / np.maximum(norms, 1e-300))


def build_family(
    oracle: Modification | None,
    L2: float,
    dim: int,
    horizon: int,
    alpha: float,
    seed: int = 0,
    scales=(0.1, 0.5, 1.0),
    n_random: int = 2,
    sentinel: bool = True,
) -> CandidateFamily:
    """Oracle first, then Gaussian perturbations of it, random point lists and the no-skip sentinel."""
    rng = np.random.default_rng(seed)
    mods = []
    if oracle is not None:
        mods.append(oracle)
        for scale in scales:
            stages = tuple(
                _project_ball(p + rng.normal(scale=scale * L2 / math.sqrt(dim), size=p.shape), L2)
                for p in oracle.per_stage
            )
            mods.append(Modification(alpha, stages, tag=f"perturbed-{scale:g}"))
    counts = [len(p) for p in oracle.per_stage] if oracle is not None else [1] * horizon
    for i in range(n_random):
        stages = []
        for k in counts:
            x = rng.normal(size=(k, dim))
            radius = L2 * rng.uniform(size=(k, 1)) ** (1.0 / dim)
            stages.append(x / np.linalg.norm(x, axis=1, keepdims=True) * radius)
        mods.append(Modification(alpha, tuple(stages), tag=f"random-{i}"))
    if sentinel:
        mods.append(Modification.sentinel(alpha, horizon, dim))
    return CandidateFamily(tuple(mods))


@dataclass
class LearnerConfig:
    """Settings shared by both learners.

    ``L2`` bounds the realizing parameters and ``cstar`` is the
    concentrability used to size the filter threshold.
    """

    L2: float
    cstar: float
    delta: float = 0.1
    eps: float = 0.1
    alpha: float | None = None
    multipliers: Multipliers = field(default_factory=Multipliers)
    set_mode: str = "propagated"
    d0: int | None = None
    pi_e: Policy | None = None
    pi_b: Policy | None = None
    workers: int = 1

    def validate(self, mode: str):
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ConfigError("eps and delta must lie in (0, 1)")
        if self.set_mode not in ("propagated", "canonical"):
            raise ConfigError(f"unknown set mode {self.set_mode!r}")
        if mode == "eval" and (self.pi_e is None or self.pi_b is None):
            raise ConfigError("evaluation needs both the target and the behavior policy")
        if self.L2 <= 0:
            raise ConfigError("L2 must be positive")

    def resolve_alpha(self, mode: str, H: int, d: int, n: int) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return auto_alpha(mode, self.cstar, H, d, n)

    def constants(self, mode: str, features: FeatureMap, H: int, A: int, n: int) -> Constants:
        d = features.dim
        return compute_constants(
            H=H,
            d=d,
            d0=self.d0 or design_size(d),
            A=A,
            n=n,
            L1=features.norm_bound,
            L2=self.L2,
            alpha=self.resolve_alpha(mode, H, d, n),
            delta=self.delta,
            cstar=self.cstar,
            mode=mode,
            multipliers=self.multipliers,
        )


@dataclass(frozen=True, eq=False)
class StageData:
    """Per-stage views of the dataset through the features."""

    phi_all: tuple  # (n, A, d) per stage
    rows: tuple  # (n, d) per stage, taken actions
    rewards: np.ndarray  # (n, H+1)
    states: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, features: FeatureMap) -> "StageData":
        H = dataset.horizon
        phi_all, rows = [], []
        idx = np.arange(dataset.n)
        for h in range(H + 1):
            p = features.phi[h][dataset.states[:, h]]
            phi_all.append(p)
            rows.append(p[idx, dataset.actions[:, h]])
        return cls(tuple(phi_all), tuple(rows), dataset.rewards, dataset.states)


@dataclass(frozen=True, eq=False)
class GRecursion:
    modification: Modification
    thetas: np.ndarray  # (H+1, d), terminal zero
    designs: tuple
    widths: np.ndarray  # (H,)
    beta: float

    def q_table(self, features: FeatureMap, h: int) -> np.ndarray:
        H = len(self.thetas) - 1
        return np.clip(features.phi[h] @ self.thetas[h], 0.0, H)

    def q_tables(self, features: FeatureMap) -> list:
        return [self.q_table(features, h) for h in range(len(self.thetas))]

    @property
    def worst_width(self) -> float:
        return float(self.widths.max(initial=0.0))


def _reduce(mode, vals, probs):
    if mode == "eval":
        return np.einsum("na,na->n", probs, vals)
    return vals.max(axis=1)


def _linearised(mode, phi_all, theta, probs, H):
    # feature whose inner product with theta gives the reduced downstream value
    if mode == "eval":
        return np.einsum("na,nad->nd", probs, phi_all)
    vals = np.clip(phi_all @ theta, 0.0, H)
    return phi_all[np.arange(len(vals)), np.argmax(vals, axis=1)]


def run_recursion(
    data: StageData,
    features: FeatureMap,
    G: Modification,
    consts: Constants,
    mode: str,
    pi_e: Policy | None = None,
    set_mode: str = "propagated",
) -> GRecursion:
    """Backward least-squares chain on skippy targets plus per-stage confidence widths.

    ``set_mode="canonical"`` measures each stage's width over the single
    ellipsoid around its estimate.  ``"propagated"`` also carries the
    uncertainty of the downstream estimates through the linear map from
    downstream parameters to the stage estimate.
    """
    if mode not in ("eval", "opt"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "eval" and pi_e is None:
        raise ConfigError("evaluation recursion needs the target policy")
    H = len(data.rows) - 1
    n, d = data.rows[0].shape
    skip = skip_weights(features, G)
    om = [skip.omega[h][data.states[:, h]] for h in range(H + 1)]
    pe = [pi_e.probs[h][data.states[:, h]] for h in range(H + 1)] if mode == "eval" else [None] * (H + 1)
    L2p, lam, beta = consts.L2p, consts.lam, consts.beta

    thetas = np.zeros((H + 1, d))
    designs = [None] * H
    widths = np.zeros(H)
    U = np.zeros(n)  # target at the stage below the current one
    Qred = np.zeros(n)
    psi = [None] * (H + 1)  # linearised downstream features
    terms = [None] * (H + 1)
    terms[H] = []
    for h in range(H - 1, -1, -1):
        U = data.rewards[:, h] + (1 - om[h + 1]) * Qred + om[h + 1] * U
        design = StageDesignMatrix(data.rows[h], lam)
        thetas[h] = constrained_ls(data.rows[h], U, L2p, lam)
        designs[h] = design
        # stage-h reductions feed the next (earlier) target
        vals = np.clip(data.phi_all[h] @ thetas[h], 0.0, H)
        Qred = _reduce(mode, vals, pe[h]) if h > 0 else Qred
        psi[h] = _linearised(mode, data.phi_all[h], thetas[h], pe[h], H)

        centre = data.rows[h] @ thetas[h]
        if set_mode == "canonical":
            cs = ConfidenceSet(thetas[h], beta, design, L2p)
            widths[h] = float(np.mean(ellipsoid_widths(cs, data.rows[h], H)))
            continue
        # propagated set: own ellipsoid plus mapped downstream sets
        own = [(h, np.eye(d))]
        weight = np.ones(n)
        for u in range(h + 1, H):
            F = weight * (1 - om[u])
            weight = weight * om[u]
            if not np.any(F):
                continue
            K = design.solve(data.rows[h].T @ (F[:, None] * psi[u]))
            for v, M in terms[u]:
                KM = K @ M
                if np.linalg.norm(KM) > PRUNE_TOL:
                    own.append((v, KM))
        terms[h] = own
        support = np.zeros(n)
        for v, M in own:
            support += beta * designs[v].inverse_norms(data.rows[h] @ M)
        hi = np.clip(centre + support, 0.0, H)
        lo = np.clip(centre - support, 0.0, H)
        widths[h] = float(np.mean(hi - lo))
    return GRecursion(G, thetas, tuple(designs), widths, beta)


def filter_G(recursions, eps_bar: float):
    """Indices of recursions whose worst stage width is at most ``eps_bar``."""
    keep = [i for i, rec in enumerate(recursions) if rec.worst_width <= eps_bar]
    if not keep:
        raise EmptyFilterError(
            f"no modification passed the filter (threshold {eps_bar:.4g})",
            {rec.modification.tag: rec.worst_width for rec in recursions},
        )
    return keep


def _run_all(data, features, family, consts, mode, pi_e, set_mode, workers):
    job = lambda G: run_recursion(data, features, G, consts, mode, pi_e, set_mode)
    workers = worker_count(workers)
    if workers > 1 and len(family) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, family))
    return [job(G) for G in family]


@dataclass
class LearnerResult:
    mode: str
    value: float
    chosen: int
    policy: Policy | None
    recursion: GRecursion
    constants: Constants
    accepted: list
    recursions: list
    scores: list
    start_values: list
    wall_time: float

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "value": self.value,
            "chosen": self.chosen,
            "chosen_tag": self.recursion.modification.tag,
            "accepted": self.accepted,
            "constants": self.constants.as_dict(),
            "candidates": [
                {
                    "tag": rec.modification.tag,
                    "widths": rec.widths.tolist(),
                    "score": self.scores[i],
                    "start_value": self.start_values[i],
                    "accepted": i in self.accepted,
                }
                for i, rec in enumerate(self.recursions)
            ],
            "set_mode_note": "set widths use a linearised propagation of downstream confidence sets",
            "wall_time": self.wall_time,
        }


def _setup(dataset, features, config, mode, family):
    config.validate(mode)
    H = dataset.horizon
    A = features.phi[0].shape[1]
    if len(features.phi) != H + 1:
        raise InvalidInputError("features and dataset disagree on the horizon")
    consts = config.constants(mode, features, H, A, dataset.n)
    if any(G.alpha != consts.alpha for G in family):
        raise ConfigError(f"family alpha differs from the configured alpha {consts.alpha:.6g}")
    return StageData.build(dataset, features), consts


def eval_learner(dataset: Dataset, features: FeatureMap, config: LearnerConfig, family: CandidateFamily) -> LearnerResult:
    """Estimate the target policy's value by the advantage-score selection rule."""
    t0 = time.perf_counter()
    data, consts = _setup(dataset, features, config, "eval", family)
    pi_e, pi_b = config.pi_e, config.pi_b
    recs = _run_all(data, features, family, consts, "eval", pi_e, config.set_mode, config.workers)
    accepted = filter_G(recs, consts.eps_bar)
    H = dataset.horizon
    scores, starts = [], []
    for rec in recs:
        skip = skip_weights(features, rec.modification)
        worst = 0.0
        for h in range(H):
            s = data.states[:, h]
            q = rec.q_table(features, h)[s]
            gap = np.einsum("na,na->n", pi_e.probs[h][s] - pi_b.probs[h][s], q)
            worst = max(worst, float(np.mean(np.abs(skip.omega[h][s] * gap))))
        scores.append(worst)
        w0 = skip.omega[0][0]
        mix = w0 * pi_b.probs[0][0] + (1 - w0) * pi_e.probs[0][0]
        starts.append(float(mix @ rec.q_table(features, 0)[0]))
    chosen = min(accepted, key=lambda i: (scores[i], i))
    return LearnerResult(
        "eval", starts[chosen], chosen, None, recs[chosen], consts, accepted, recs, scores, starts,
        time.perf_counter() - t0,
    )


def greedy_policy(features: FeatureMap, rec: GRecursion) -> Policy:
    A = features.phi[0].shape[1]
    probs = [np.eye(A)[np.argmax(rec.q_table(features, h), axis=1)] for h in range(len(features.phi))]
    return Policy(tuple(probs))


def opt_learner(dataset: Dataset, features: FeatureMap, config: LearnerConfig, family: CandidateFamily) -> LearnerResult:
    """Pick the accepted candidate with the largest optimistic start value and act greedily on it."""
    t0 = time.perf_counter()
    data, consts = _setup(dataset, features, config, "opt", family)
    recs = _run_all(data, features, family, consts, "opt", None, config.set_mode, config.workers)
    accepted = filter_G(recs, consts.eps_bar)
    starts = [float(rec.q_table(features, 0)[0].max()) for rec in recs]
    chosen = max(accepted, key=lambda i: (starts[i], -i))
    policy = greedy_policy(features, recs[chosen])
    return LearnerResult(
        "opt", starts[chosen], chosen, policy, recs[chosen], consts, accepted, recs, [0.0] * len(recs), starts,
        time.perf_counter() - t0,
    )


def fqe(dataset: Dataset, features: FeatureMap, pi_e: Policy, lam: float, bound: float = math.inf) -> np.ndarray:
    """Plain fitted Q evaluation with clipping; returns per-stage parameters."""
    H, d = dataset.horizon, features.dim
    thetas = np.zeros((H + 1, d))
    for h in range(H - 1, -1, -1):
        s_next = dataset.states[:, h + 1]
        q_next = np.clip(features.phi[h + 1][s_next] @ thetas[h + 1], 0.0, H)
        y = dataset.rewards[:, h] + np.sum(pi_e.probs[h + 1][s_next] * q_next, axis=1)
        X = features.phi[h][dataset.states[:, h], dataset.actions[:, h]]
        thetas[h] = constrained_ls(X, y, bound, lam)
    return thetas


def greedy_improvement_check(mdp: StagedMdp, pi: Policy, q_perturbed, kappa: float, rng=None, trials: int = 50):
    """Check ``E_nu[v^pi(S_h) - v^{pi'}(S_h)] <= 2 (H - h + 1) kappa`` for the greedy ``pi'``.

    ``nu`` ranges over stage marginals of random deterministic policies.
    Stages are counted from 1 in the bound.  Returns ``(ok, worst_slack)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    H, A = mdp.horizon, mdp.num_actions
    greedy = Policy(tuple(np.eye(A)[np.argmax(q, axis=1)] for q in q_perturbed))
    _, v = backward_q(mdp, pi)
    _, v2 = backward_q(mdp, greedy)
    worst = -math.inf
    for _ in range(trials):
        nu = occupancy(mdp, Policy.random(mdp, rng, deterministic=True))
        for h in range(H + 1):
            lhs = float(nu.state_marginal(h) @ (v[h] - v2[h]))
            worst = max(worst, lhs - 2 * (H - h) * kappa)
    return worst <= 1e-9, worst


def population_recursion(
    mdp: StagedMdp,
    features: FeatureMap,
    G: Modification,
    mode: str,
    behavior: Policy,
    pi_e: Policy | None = None,
    lam: float = 1e-10,
):
    """Noise-free recursion: exact skippy targets fitted under the behavior occupancy.

    Returns ``(thetas, q_tables, start_value)``; the start value uses the
    skippy target policy in ``"eval"`` mode and the greedy maximum otherwise.
    """
    skip = skip_weights(features, G)
    mu = occupancy(mdp, behavior).tables
    H, d = mdp.horizon, features.dim
    thetas = np.zeros((H + 1, d))
    q = [np.zeros_like(r) for r in mdp.rewards]
    for h in range(H - 1, -1, -1):
        if mode == "eval":
            T = exact_T_pi_G(mdp, behavior, skip, pi_e, q, h)
        else:
            T = exact_T_G(mdp, behavior, skip, q, h)
        w = mu[h].reshape(-1)
        Phi = features.phi[h].reshape(-1, d)
        lhs = (Phi.T * w) @ Phi + lam * np.eye(d)
        thetas[h] = np.linalg.solve(lhs, (Phi.T * w) @ T.reshape(-1))
        q[h] = np.clip(features.phi[h] @ thetas[h], 0.0, H)
    if mode == "eval":
        w0 = skip.omega[0][0]
        start = float((w0 * behavior.probs[0][0] + (1 - w0) * pi_e.probs[0][0]) @ q[0][0])
    else:
        start = float(q[0][0].max())
    return thetas, q, start
