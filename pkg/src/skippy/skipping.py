"""Skip weights, stopping distributions, skippy policies and exact skippy operators."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .features import FeatureMap, Modification, range_G
from .mdp import Policy, StagedMdp, backward_q

CLIP_TOL = 1e-12

# test hook: names of deliberately broken code paths (see ``inject_fault``)
_FAULTS: set = set()
DROP_STOP_FACTOR = "drop-stop-factor"


@contextlib.contextmanager
def inject_fault(name: str):
    """Temporarily break a code path so oracle checks can be shown to catch it."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


def _stop_factor(w):
    return 1.0 if DROP_STOP_FACTOR in _FAULTS else 1.0 - w


@dataclass(frozen=True, eq=False)
class SkipWeights:
    """``omega[h]`` has shape ``(n_h,)``; the terminal stage is zero."""

    omega: tuple

    def __post_init__(self):
        om = tuple(np.asarray(w, dtype=np.float64) for w in self.omega)
        if np.any(om[-1] != 0):
            raise InvalidInputError("terminal skip weight must be zero")
        if any(np.any((w < 0) | (w > 1)) for w in om):
            raise InvalidInputError("skip weights must lie in [0, 1]")
        object.__setattr__(self, "omega", om)

    @classmethod
    def constant(cls, mdp: StagedMdp, value: float) -> "SkipWeights":
        sizes = mdp.stage_sizes
        return cls(tuple(np.full(n, value) for n in sizes[:-1]) + (np.zeros(sizes[-1]),))


def omega_from_range(rng, alpha: float, d: int):
    """Piecewise-linear skip weight: 1 below ``alpha/(2 sqrt(2d))``, 0 above ``alpha/sqrt(2d)``."""
    x = 2.0 * math.sqrt(2 * d) * np.asarray(rng, dtype=np.float64) / alpha
    return np.clip(2.0 - x, 0.0, 1.0)


def skip_weights(features: FeatureMap, G: Modification) -> SkipWeights:
    H = len(features.phi) - 1
    out = []
    for h in range(H):
        n_h = features.phi[h].shape[0]
        if G.no_skip:
            out.append(np.zeros(n_h))
        else:
            out.append(omega_from_range(range_G(features, G, h), G.alpha, features.dim))
    out.append(np.zeros(features.phi[H].shape[0]))
    return SkipWeights(tuple(out))


def omega(features: FeatureMap, G: Modification, h: int, s: int) -> float:
    return float(skip_weights(features, G).omega[h][s])


def stop_distribution(omegas) -> np.ndarray:
    """``F(tau) = (1 - w_tau) prod_{u < tau} w_u`` over the given suffix of skip weights.

    ``omegas`` lists the weights at stages ``h+1 .. H+1`` along a trajectory;
    the last one belongs to the terminal state and should be zero.
    """
    w = np.asarray(omegas, dtype=np.float64)
    survive = np.concatenate([[1.0], np.cumprod(w[:-1])])
    return _stop_factor(w) * survive


def skippy_policy(pi: Policy, behavior: Policy, skip: SkipWeights) -> Policy:
    """Follow ``behavior`` with probability ``omega(s)`` and ``pi`` otherwise."""
    probs = tuple(
        w[:, None] * b + (1 - w[:, None]) * p for w, b, p in zip(skip.omega, behavior.probs, pi.probs)
    )
    return Policy(probs)


def skippy_optimal_policy(mdp: StagedMdp, behavior: Policy, skip: SkipWeights):
    """Behavior mixed with the greedy action on its own q (ties to the lowest index).

    Returns ``(policy, q)`` where ``q`` lists the policy's tables per stage.
    """
    H, A = mdp.horizon, mdp.num_actions
    q = [None] * (H + 1)
    probs = [None] * (H + 1)
    q[H] = np.zeros_like(mdp.rewards[H])
    for h in range(H, -1, -1):
        if h < H:
            v_next = np.einsum("sa,sa->s", probs[h + 1], q[h + 1])
            q[h] = mdp.rewards[h] + mdp.transitions[h] @ v_next
        greedy = np.eye(A)[np.argmax(q[h], axis=1)]
        w = skip.omega[h][:, None]
        probs[h] = w * behavior.probs[h] + (1 - w) * greedy
    return Policy(tuple(probs)), q


def _check_future(mdp: StagedMdp, q_future, h: int):
    H = mdp.horizon
    if len(q_future) != H + 1:
        raise InvalidInputError("q_future must be indexed by stage 0..H")
    for u in range(h + 1, H + 1):
        t = np.asarray(q_future[u])
        if t.shape != mdp.rewards[u].shape:
            raise InvalidInputError(f"q_future stage {u} has wrong shape")
        if np.any(t < -CLIP_TOL) or np.any(t > H + CLIP_TOL):
            raise InvalidInputError(f"q_future stage {u} is not clipped to [0, {H}]")
    if np.any(np.asarray(q_future[H]) != 0):
        raise InvalidInputError("q_future must vanish at the terminal stage")


def _skippy_backup(mdp, behavior, skip, q_future, h, reduce):
    _check_future(mdp, q_future, h)
    H = mdp.horizon
    m = np.zeros(mdp.stage_sizes[H])
    for u in range(H - 1, h, -1):
        w = skip.omega[u]
        cont = mdp.rewards[u] + mdp.transitions[u] @ m
        base = np.einsum("sa,sa->s", behavior.probs[u], cont)
        m = _stop_factor(w) * reduce(u, np.asarray(q_future[u])) + w * base
    return mdp.rewards[h] + mdp.transitions[h] @ m


def exact_T_pi_G(mdp: StagedMdp, behavior: Policy, skip: SkipWeights, pi: Policy, q_future, h: int) -> np.ndarray:
    """Expected skippy policy target at every stage-``h`` pair, by backward recursion.

    ``q_future[u]`` must be given for ``u = h+1 .. H`` (earlier entries are ignored).
    """
    return _skippy_backup(
        mdp, behavior, skip, q_future, h, lambda u, t: np.einsum("sa,sa->s", pi.probs[u], t)
    )


def exact_T_G(mdp: StagedMdp, behavior: Policy, skip: SkipWeights, q_future, h: int) -> np.ndarray:
    """Skippy optimality operator: the ``pi``-average is replaced by a per-state max."""
    return _skippy_backup(mdp, behavior, skip, q_future, h, lambda u, t: t.max(axis=1))


def g_target(rewards, omegas, future_values) -> float:
    """Skippy regression target for one trajectory suffix.

    ``rewards`` start at ``R_h`` (a trailing terminal reward is ignored);
    ``omegas`` and ``future_values`` cover the stages after ``h`` through
    the terminal one and hold ``w(S_tau)`` and the reduced future value
    ``q_tau(S_tau, pi)`` (or ``max_a q_tau(S_tau, a)``).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    F = stop_distribution(omegas)
    partial = np.cumsum(rewards)[: len(F)]  # rewards from h up to tau - 1
    return float(np.dot(F, partial + np.asarray(future_values, dtype=np.float64)))


def q_of_skippy(mdp: StagedMdp, pi: Policy, behavior: Policy, skip: SkipWeights):
    """Exact q tables of the skippy policy built from ``pi``."""
    return backward_q(mdp, skippy_policy(pi, behavior, skip))[0]
