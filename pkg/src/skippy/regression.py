"""Ridge and ball-constrained least squares, elliptical norms, confidence sets and constants."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import brentq

from .errors import InvalidInputError
from .features import FeatureMap
from .mdp import Policy, StagedMdp, occupancy, sample_dataset

ROOT_TOL = 1e-10


class StageDesignMatrix:
    """``lam * I + sum_j phi_j phi_j^T`` with its Cholesky factor built once."""

    def __init__(self, features_rows: np.ndarray, lam: float):
        rows = np.atleast_2d(np.asarray(features_rows, dtype=np.float64))
        if lam <= 0:
            raise InvalidInputError("regularisation must be positive")
        self.lam = float(lam)
        self.gram = rows.T @ rows
        self.matrix = self.gram + lam * np.eye(rows.shape[1])
        self._chol = np.linalg.cholesky(self.matrix)
        self._eig = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self._chol, True), b)

    def whiten(self, vecs) -> np.ndarray:
        """``L^{-1} v`` for each row ``v``; its norm is the elliptical norm."""
        v = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
        return solve_triangular(self._chol, v.T, lower=True).T

    def inverse_norms(self, vecs) -> np.ndarray:
        return np.linalg.norm(self.whiten(vecs), axis=1)

    def norms(self, vecs) -> np.ndarray:
        """``||v||_X`` for each row ``v``."""
        v = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", v, self.matrix, v), 0.0))

    @property
    def eig(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.matrix)
        return self._eig


def elliptical_norm(design: StageDesignMatrix, vec) -> float:
    """``sqrt(v^T X^{-1} v)``."""
    return float(design.inverse_norms(vec)[0])


def _ball_ridge(gram_eig, rhs, lam, bound):
    vals, vecs = gram_eig
    b = vecs.T @ rhs
    theta = b / (vals + lam)
    norm = np.linalg.norm(theta)
    if norm <= bound:
        return vecs @ theta
    f = lambda mu: np.linalg.norm(b / (vals + lam + mu)) - bound
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    mu = brentq(f, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    theta = vecs @ (b / (vals + lam + mu))
    return theta * min(1.0, bound / max(np.linalg.norm(theta), 1e-300))


def constrained_ls(phi_rows, targets, bound: float, lam: float) -> np.ndarray:
    """Minimise ``||Phi theta - y||^2 + lam ||theta||^2`` over ``||theta|| <= bound``.

    The unconstrained ridge solution is returned when feasible; otherwise the
    ball multiplier is found by a scalar root-find in the Gram eigenbasis,
    which gives the exact constrained minimiser.
    """
    Phi = np.atleast_2d(np.asarray(phi_rows, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if Phi.shape[0] != y.shape[0] or Phi.shape[0] < 1:
        raise InvalidInputError("need one target per feature row")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("targets must be finite")
    return _ball_ridge(np.linalg.eigh(Phi.T @ Phi), Phi.T @ y, lam, bound)


def ls_objective(phi_rows, targets, theta, lam):
    r = phi_rows @ theta - targets
    return float(r @ r + lam * theta @ theta)


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    """``{theta : ||theta - center||_X <= beta} intersected with B(bound)``."""

    center: np.ndarray
    beta: float
    design: StageDesignMatrix
    bound: float

    def contains(self, theta, tol: float = 1e-9) -> bool:
        theta = np.asarray(theta, dtype=np.float64)
        ell = self.design.norms(theta - self.center)[0]
        return bool(ell <= self.beta + tol and np.linalg.norm(theta) <= self.bound + tol)


def _inner_max(phi_t, c_t, x, beta, nu):
    """argmax over the ellipsoid of ``<phi,theta> - nu/2 ||theta||^2`` in the X eigenbasis."""
    if nu <= 0:
        w = phi_t / x
        return c_t + beta * w / math.sqrt(max(np.dot(phi_t, w), 1e-300))
    free = phi_t / nu
    if np.dot(x * (free - c_t), free - c_t) <= beta * beta:
        return free
    theta = lambda mu: (phi_t + mu * x * c_t) / (nu + mu * x)
    g = lambda mu: math.sqrt(np.dot(x * (theta(mu) - c_t), theta(mu) - c_t)) - beta
    hi = 1.0
    while g(hi) > 0:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= ROOT_TOL * max(1.0, hi):
            break
    return theta(hi)


def support_value(cs: ConfidenceSet, phi) -> float:
    """``max <phi, theta>`` over the ball-ellipsoid intersection (unclipped)."""
    phi = np.asarray(phi, dtype=np.float64)
    pnorm = np.linalg.norm(phi)
    if pnorm == 0:
        return 0.0
    x, Q = cs.design.eig
    phi_t, c_t = Q.T @ phi, Q.T @ cs.center
    if cs.beta == 0:
        return float(phi @ cs.center)
    theta = _inner_max(phi_t, c_t, x, cs.beta, 0.0)
    if np.linalg.norm(theta) <= cs.bound:
        return float(phi_t @ theta)
    ball_pt = cs.bound * phi_t / pnorm
    if np.dot(x * (ball_pt - c_t), ball_pt - c_t) <= cs.beta**2:
        return float(cs.bound * pnorm)
    # both constraints active: bisection on the ball multiplier
    norm_at = lambda nu: np.linalg.norm(_inner_max(phi_t, c_t, x, cs.beta, nu))
    hi = 1.0
    while norm_at(hi) > cs.bound:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > cs.bound:
            lo = mid
        else:
            hi = mid
        if hi - lo <= ROOT_TOL * max(1.0, hi):
            break
    return float(phi_t @ _inner_max(phi_t, c_t, x, cs.beta, hi))


def ellipsoid_extremes(cs: ConfidenceSet, phi, H: float, clip: bool = True):
    """``(lo, hi)`` of ``<phi, theta>`` over the confidence set, clipped to ``[0, H]``.

    The ellipsoid support ``<phi, c> +- beta ||phi||_{X^-1}`` is used when its
    extremiser lies in the ball; otherwise the intersection is solved exactly.
    """
    phi = np.asarray(phi, dtype=np.float64)
    hi = support_value(cs, phi)
    lo = -support_value(cs, -phi)
    if clip:
        return float(np.clip(lo, 0.0, H)), float(np.clip(hi, 0.0, H))
    return lo, hi


def ellipsoid_widths(cs: ConfidenceSet, phi_rows, H: float) -> np.ndarray:
    """Clipped width ``hi - lo`` for each row; fast path when no extremiser leaves the ball."""
    rows = np.atleast_2d(phi_rows)
    center = rows @ cs.center
    w = cs.design.solve(rows.T).T
    s = np.sqrt(np.maximum(np.einsum("ij,ij->i", rows, w), 0.0))
    hi = center + cs.beta * s
    lo = center - cs.beta * s
    safe = np.where(s > 0, s, 1.0)[:, None]
    ext = cs.beta * w / safe
    out_ball = (np.linalg.norm(cs.center + ext, axis=1) > cs.bound) | (
        np.linalg.norm(cs.center - ext, axis=1) > cs.bound
    )
    for i in np.flatnonzero(out_ball & (s > 0)):
        lo[i], hi[i] = ellipsoid_extremes(cs, rows[i], H, clip=False)
    return np.clip(hi, 0.0, H) - np.clip(lo, 0.0, H)


# ---------------------------------------------------------------- constants


@dataclass(frozen=True)
class Multipliers:
    beta: float = 1.0
    eps_bar: float = 1.0
    zeta1: float = 1.0
    zeta2: float = 1.0


@dataclass(frozen=True)
class Constants:
    H: int
    d: int
    d0: int
    A: int
    n: int
    L1: float
    L2: float
    L2p: float
    alpha: float
    delta: float
    cstar: float
    lam: float
    beta_bar: float
    beta: float
    zeta1: float
    zeta2: float
    eps_check: float
    eps_bar: float
    eps_tilde: float
    alpha_tilde: float

    def as_dict(self) -> dict:
        return asdict(self)


def modified_bound(L2: float, H: int, d0: int, alpha: float) -> float:
    return L2 * (8 * H * H * d0 / alpha + 1)


def lambda_reg(H: int, d: int, L2p: float) -> float:
    return H**1.5 * d / L2p


def beta_bar(H, d, d0, L1, L2, L2p, alpha, lam, n, delta) -> float:
    inner = (
        2 * d * H * (d0 + 1) * math.log(1 + 28 * math.sqrt(2 * d) * H * H * L2 * L2p * L1 / alpha)
        + d * math.log(lam + n * L1 * L1 / d)
        - d * math.log(lam)
        + math.log(10 * H / delta)
    )
    return 2 * H * math.sqrt(inner)


def beta_radius(H, d, d0, L1, L2, L2p, alpha, lam, n, delta, c_beta: float = 1.0) -> float:
    return c_beta * (math.sqrt(lam) * L2p + beta_bar(H, d, d0, L1, L2, L2p, alpha, lam, n, delta))


def zeta1(H, d, d0, L1, L2, L2p, alpha, n, delta) -> float:
    arg = 1 + 96 * n * math.sqrt(2 * d) * H * H * L1 * L1 * L2 * L2p / (alpha * H**1.5 * d)
    return 2 * H / math.sqrt(n) * math.sqrt(d * H * H * d0 * math.log(arg) + math.log(20 * H / delta))


def zeta2(H, d, A, L1, L2p, n, delta) -> float:
    return math.sqrt(d) * H / math.sqrt(n) * math.sqrt(math.log(4 * H * A * A * (1 + 4 * L2p * L1) / delta)) + 1


def auto_alpha(mode: str, cstar: float, H: int, d: int, n: int) -> float:
    power = 2.5 if mode == "eval" else 1.5
    return cstar**power * H**2.5 * d**1.5 / math.sqrt(n)


def compute_constants(
    *,
    H: int,
    d: int,
    d0: int,
    A: int,
    n: int,
    L1: float,
    L2: float,
    alpha: float,
    delta: float,
    cstar: float,
    mode: str = "eval",
    multipliers: Multipliers = Multipliers(),
) -> Constants:
    """All confidence constants; evaluation splits ``delta`` in half for its two events."""
    if not (0 < delta < 1):
        raise InvalidInputError("delta must lie in (0, 1)")
    if alpha <= 0 or n < 1:
        raise InvalidInputError("alpha and n must be positive")
    L2p = modified_bound(L2, H, d0, alpha)
    lam = lambda_reg(H, d, L2p)
    dl = delta / 2 if mode == "eval" else delta
    bb = beta_bar(H, d, d0, L1, L2, L2p, alpha, lam, n, dl)
    beta = multipliers.beta * (math.sqrt(lam) * L2p + bb)
    z1 = multipliers.zeta1 * zeta1(H, d, d0, L1, L2, L2p, alpha, n, dl)
    z2 = multipliers.zeta2 * zeta2(H, d, A, L1, L2p, n, delta)
    eps_check = 15 * d / n
    c = cstar if math.isfinite(cstar) else float("inf")
    eps_bar = multipliers.eps_bar * (z1 + 4 * math.sqrt(c) * H * beta * math.sqrt(eps_check))
    eps_tilde = c * (eps_bar + z1)
    alpha_tilde = c * (alpha + 2 * eps_tilde + 2 * z2)
    return Constants(
        H, d, d0, A, n, L1, L2, L2p, alpha, delta, cstar, lam, bb, beta, z1, z2, eps_check, eps_bar, eps_tilde,
        alpha_tilde,
    )


# ---------------------------------------------------------------- covariance


def min_samples(L1: float, d: int, H: int, delta: float) -> float:
    return 6 * L1 * L1 * (math.log(d) + math.log(40 * H / delta))


def expected_inverse_norm(mdp: StagedMdp, behavior: Policy, features: FeatureMap, dataset, lam: float):
    """Per-stage exact ``E_mu ||phi||^2_{X^-1}`` with ``X`` built from the dataset."""
    mu = occupancy(mdp, behavior).tables
    out = []
    for h in range(mdp.horizon):
        rows = features.phi[h][dataset.states[:, h], dataset.actions[:, h]]
        design = StageDesignMatrix(rows, lam)
        flat = features.phi[h].reshape(-1, features.dim)
        sq = design.inverse_norms(flat) ** 2
        out.append(float(np.dot(mu[h].reshape(-1), sq)))
    return np.asarray(out)


def covariance_concentration_check(
    mdp: StagedMdp,
    behavior: Policy,
    features: FeatureMap,
    n: int,
    seeds,
    lam: float,
    delta: float = 0.05,
) -> dict:
    """Fraction of seeds on which every stage satisfies ``E_mu ||phi||^2_{X^-1} <= 15 d / n``."""
    d, H = features.dim, mdp.horizon
    need = min_samples(features.norm_bound, d, H, delta)
    if n < need:
        raise InvalidInputError(f"n={n} is below the required n >= {math.ceil(need)}")
    bound = 15 * d / n
    per_seed = []
    for seed in seeds:
        ds = sample_dataset(mdp, behavior, n, int(seed))
        per_seed.append(expected_inverse_norm(mdp, behavior, features, ds, lam))
    values = np.asarray(per_seed)
    holds = np.all(values <= bound, axis=1) if len(values) else np.zeros(0, dtype=bool)
    fraction = float(holds.mean()) if len(holds) else 1.0
    return {
        "n": n,
        "bound": bound,
        "values": values,
        "fraction": fraction,
        "passes": fraction >= 1 - delta,
        "worst": float(values.max(initial=0.0)),
    }


def covariance_slope(mdp, behavior, features, ns, seeds, lam) -> float:
    """Least-squares slope of ``log E ||phi||^2_{X^-1}`` (worst stage, mean over seeds) against ``log n``."""
    ys = []
    for n in ns:
        vals = [expected_inverse_norm(mdp, behavior, features, sample_dataset(mdp, behavior, n, int(s)), lam) for s in seeds]
        ys.append(np.mean([v.max() for v in vals]))
    return float(np.polyfit(np.log(ns), np.log(ys), 1)[0])
