"""Feature maps, linear realizability, range functions and near-optimal designs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CertificateError, InvalidInputError
from .mdp import Policy, StagedMdp, backward_q

NORM_TOL = 1e-9
DEDUP_TOL = 1e-9
FIT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``phi[h]`` has shape ``(n_h, A, d)`` for stages ``0..H``."""

    phi: tuple
    norm_bound: float

    def __post_init__(self):
        phi = tuple(np.ascontiguousarray(p, dtype=np.float64) for p in self.phi)
        d = phi[0].shape[2]
        for h, p in enumerate(phi):
            if p.ndim != 3 or p.shape[2] != d:
                raise InvalidInputError(f"stage {h}: feature table must be (n_h, A, {d})")
            if np.any(np.linalg.norm(p, axis=2) > self.norm_bound + NORM_TOL):
                raise InvalidInputError(f"stage {h}: feature norm exceeds L1={self.norm_bound}")
            p.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def dim(self) -> int:
        return self.phi[0].shape[2]

    def check_against(self, mdp: StagedMdp) -> None:
        if len(self.phi) != mdp.horizon + 1 or any(
            p.shape[:2] != r.shape for p, r in zip(self.phi, mdp.rewards)
        ):
            raise InvalidInputError("feature map stages do not match the MDP")

    def values(self, h: int, theta) -> np.ndarray:
        return self.phi[h] @ np.asarray(theta, dtype=np.float64)


@dataclass(frozen=True)
class ThetaFit:
    thetas: np.ndarray  # (H+1, d); terminal row zero
    residuals: np.ndarray  # (H,)
    degenerate: tuple

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max(initial=0.0))

    def realizable(self, bound: float) -> bool:
        norms = np.linalg.norm(self.thetas, axis=1)
        return self.max_residual <= FIT_TOL and bool(np.all(norms <= bound + NORM_TOL))


def fit_table(features: FeatureMap, h: int, table: np.ndarray):
    """Least-squares (minimum norm) parameter for a stage table; returns ``(theta, residual, rank)``."""
    Phi = features.phi[h].reshape(-1, features.dim)
    y = np.asarray(table, dtype=np.float64).reshape(-1)
    theta, _, rank, _ = np.linalg.lstsq(Phi, y, rcond=None)
    return theta, float(np.max(np.abs(Phi @ theta - y), initial=0.0)), int(rank)


def fit_theta(mdp: StagedMdp, features: FeatureMap, pi: Policy) -> ThetaFit:
    features.check_against(mdp)
    q, _ = backward_q(mdp, pi)
    H, d = mdp.horizon, features.dim
    thetas = np.zeros((H + 1, d))
    res = np.zeros(H)
    degenerate = []
    for h in range(H):
        thetas[h], res[h], rank = fit_table(features, h, q[h])
        degenerate.append(rank < d)
    return ThetaFit(thetas, res, tuple(degenerate))


def exact_ranges(mdp: StagedMdp, impl=None) -> list:
    """Per-stage arrays of ``sup_pi max_{a,a'} q^pi(s,a) - q^pi(s,a')``.

    The supremum over memoryless policies is attained at a deterministic
    continuation because ``q^pi(s, .)`` is multilinear in the downstream
    action distributions, so the kernel enumerates deterministic ones.
    """
    sizes, r, P = mdp.padded
    out = []
    for h in range(mdp.horizon):
        gaps = kernels.max_action_gaps(h, sizes, r, P, impl=impl)
        out.append(np.maximum(gaps.max(axis=(1, 2)), 0.0))
    out.append(np.zeros(1))
    return out


def exact_range(mdp: StagedMdp, h: int, s: int, impl=None) -> float:
    if h >= mdp.horizon:
        raise InvalidInputError("range is undefined at the terminal stage")
    sizes, r, P = mdp.padded
    gaps = kernels.max_action_gaps(h, sizes, r, P, impl=impl)
    return max(0.0, float(gaps[s].max()))


def dedup_rows(X: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    """Drop rows within ``tol`` (l-inf) of an earlier kept row."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return X
    X = np.unique(np.round(X / tol) * tol, axis=0)
    kept = [X[0]]
    for row in X[1:]:
        if np.min(np.max(np.abs(np.asarray(kept) - row), axis=1)) > tol:
            kept.append(row)
    return np.asarray(kept)


def parameter_candidates(mdp: StagedMdp, features: FeatureMap, h: int, impl=None) -> np.ndarray:
    """Distinct stage-``h`` parameters over all deterministic policies."""
    sizes, r, P = mdp.padded
    tables = kernels.stage_q_tables(h, sizes, r, P, impl=impl)
    tables = np.unique(np.round(tables.reshape(len(tables), -1), 12), axis=0)
    Phi = features.phi[h].reshape(-1, features.dim)
    thetas = np.linalg.lstsq(Phi, tables.T, rcond=None)[0].T
    return dedup_rows(thetas)


def design_size(d: int) -> int:
    """Support cap ``ceil(4 d log log d + 16)`` with ``log log d`` floored at 0."""
    loglog = math.log(math.log(d)) if d > math.e else 0.0
    return math.ceil(4 * d * max(0.0, loglog) + 16)


@dataclass(frozen=True, eq=False)
class DesignBasis:
    points: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,)
    d0: int
    max_ratio: float
    kernel_residual: float
    iterations: int = 0

    @property
    def matrix(self) -> np.ndarray:
        return (self.points.T * self.weights) @ self.points

    def ratios(self, thetas) -> np.ndarray:
        return design_ratios(self.matrix, np.atleast_2d(thetas))


def design_ratios(V: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    Vp = np.linalg.pinv(V, rcond=1e-12, hermitian=True)
    return np.einsum("ij,jk,ik->i", thetas, Vp, thetas)


def kernel_residuals(V: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    Vp = np.linalg.pinv(V, rcond=1e-12, hermitian=True)
    return np.linalg.norm(thetas - thetas @ (V @ Vp).T, axis=1)


def _fw(Y, w, max_iter, tol):
    """Frank-Wolfe with away steps for the D-optimal design on rows of ``Y``."""
    r = Y.shape[1]
    logdet_prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        M = (Y.T * w) @ Y
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            raise np.linalg.LinAlgError("design matrix lost rank")
        g = np.einsum("ij,ij->i", Y @ np.linalg.inv(M), Y)
        i = int(np.argmax(g))
        if g[i] <= r * (1 + 1e-9):
            break
        if np.isfinite(logdet_prev) and logdet - logdet_prev < tol * max(1.0, abs(logdet)):
            break
        logdet_prev = logdet
        support = np.flatnonzero(w > 0)
        j = support[np.argmin(g[support])]
        if r - g[j] > g[i] - r and w[j] < 1:
            lo = -w[j] / (1 - w[j])
            step = lo if g[j] <= 1 else max(lo, (g[j] / r - 1) / (g[j] - 1))
            w = (1 - step) * w
            w[j] += step
            w[j] = max(w[j], 0.0)
            w /= w.sum()
        else:
            step = (g[i] / r - 1) / (g[i] - 1)
            w = (1 - step) * w
            w[i] += step
    return w, it


def build_design(candidates, d0: int, max_iter: int = 10_000, tol: float = 1e-10, bound_dim: int | None = None) -> DesignBasis:
    """Near-optimal design basis with at most ``d0`` points.

    Frank-Wolfe runs in the span of the candidates, small weights are pruned
    and the design re-optimised until the support fits in ``d0``.  The
    certificate ``max ||theta||^2_{V^+} <= 2d`` is checked on every candidate.
    """
    X = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if X.size == 0:
        raise InvalidInputError("design needs at least one candidate")
    X = dedup_rows(X)
    d = X.shape[1] if bound_dim is None else bound_dim
    _, S, Vt = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(S > 1e-10 * max(S[0], 1e-300))) if S[0] > 1e-12 else 0
    if rank == 0:
        zero = np.zeros((1, X.shape[1]))
        return DesignBasis(zero, np.ones(1), d0, 0.0, float(np.abs(X).max()), 0)
    Y = X @ Vt[:rank].T
    w = np.full(len(X), 1.0 / len(X))
    w, iters = _fw(Y, w, max_iter, tol)
    w[w < 1e-12] = 0.0
    while np.count_nonzero(w) > d0:
        support = np.flatnonzero(w)
        w[support[np.argmin(w[support])]] = 0.0
        w /= w.sum()
        support = np.flatnonzero(w)
        sub, more = _fw(Y[support], w[support], max_iter, tol)
        w[:] = 0.0
        w[support] = sub
        iters += more
        w[w < 1e-12] = 0.0
    w /= w.sum()
    keep = np.flatnonzero(w)
    basis_pts, basis_w = X[keep], w[keep]
    V = (basis_pts.T * basis_w) @ basis_pts
    ratios = design_ratios(V, X)
    kres = float(kernel_residuals(V, X).max())
    worst = float(ratios.max())
    if worst > 2 * d + 1e-9 or kres > 1e-8:
        raise CertificateError(
            f"design certificate failed: worst ratio {worst:.4g} (bound {2 * d}), kernel residual {kres:.2e}",
            worst,
        )
    return DesignBasis(basis_pts, basis_w, d0, worst, kres, iters)


@dataclass(frozen=True, eq=False)
class Modification:
    """Per-stage parameter point lists defining a range proxy and skip weights.

    ``no_skip`` marks the sentinel whose skip weight is zero everywhere; it is
    not representable by point lists when features coincide across actions.
    """

    alpha: float
    per_stage: tuple
    no_skip: bool = False
    tag: str = field(default="user", compare=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be positive")
        stages = tuple(np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in self.per_stage)
        object.__setattr__(self, "per_stage", stages)

    @property
    def horizon(self) -> int:
        return len(self.per_stage)

    def check_bound(self, bound: float) -> None:
        for h, pts in enumerate(self.per_stage):
            if pts.size and np.any(np.linalg.norm(pts, axis=1) > bound + NORM_TOL):
                raise InvalidInputError(f"stage {h}: modification point outside B({bound})")

    @classmethod
    def sentinel(cls, alpha: float, horizon: int, dim: int) -> "Modification":
        return cls(alpha, tuple(np.zeros((0, dim)) for _ in range(horizon)), no_skip=True, tag="no-skip")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "no_skip": self.no_skip,
            "tag": self.tag,
            "per_stage": [p.tolist() for p in self.per_stage],
        }

    @classmethod
    def from_dict(cls, data: dict, dim: int | None = None) -> "Modification":
        stages = []
        for pts in data["per_stage"]:
            arr = np.asarray(pts, dtype=np.float64)
            if arr.size == 0 and dim is not None:
                arr = np.zeros((0, dim))
            stages.append(arr)
        return cls(float(data["alpha"]), tuple(stages), bool(data.get("no_skip", False)), data.get("tag", "user"))


def range_G(features: FeatureMap, G: Modification, h: int) -> np.ndarray:
    """``max_{g in G_h} max_{a,a'} <phi(s,a) - phi(s,a'), g>`` for every stage-``h`` state."""
    n_h = features.phi[h].shape[0]
    if h >= G.horizon:
        return np.zeros(n_h)
    pts = G.per_stage[h]
    if pts.size == 0:
        return np.zeros(n_h)
    vals = features.phi[h] @ pts.T  # (n_h, A, k)
    return np.max(vals.max(axis=1) - vals.min(axis=1), axis=1)


@dataclass(frozen=True, eq=False)
class ModificationReport:
    designs: tuple
    candidate_counts: tuple
    stochastic_audit_ratio: float


def true_modification(
    mdp: StagedMdp,
    features: FeatureMap,
    alpha: float,
    d0: int | None = None,
    audit_policies: int = 200,
    seed: int = 0,
    impl=None,
):
    """The correct modification: per stage, a near-optimal design basis of all policies' parameters.

    Returns ``(Modification, ModificationReport)``.  Random stochastic
    policies are audited against each stage certificate.
    """
    features.check_against(mdp)
    d = features.dim
    d0 = design_size(d) if d0 is None else d0
    designs, counts, stages = [], [], []
    for h in range(mdp.horizon):
        cands = parameter_candidates(mdp, features, h, impl=impl)
        basis = build_design(cands, d0)
        designs.append(basis)
        counts.append(len(cands))
        stages.append(basis.points)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(audit_policies):
        fit = fit_theta(mdp, features, Policy.random(mdp, rng))
        for h, basis in enumerate(designs):
            worst = max(worst, float(basis.ratios(fit.thetas[h])[0]))
    G = Modification(alpha, tuple(stages), tag="oracle-G*")
    return G, ModificationReport(tuple(designs), tuple(counts), worst)
