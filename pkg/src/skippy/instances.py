"""Instance generators with a realizability audit."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .features import FeatureMap
from .mdp import Policy, StagedMdp

AUDIT_TOL = 1e-8
MAX_ATTEMPTS = 10
KINDS = ("fig1", "linear_mdp_random", "low_range_injected", "chain")


@dataclass(frozen=True)
class InstanceSpec:
    kind: str = "linear_mdp_random"
    d: int = 3
    H: int = 3
    states: int = 3
    actions: int = 2
    seed: int = 7
    rate: float = 0.5
    reward_kind: str = "deterministic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown instance kind {self.kind!r}")
        if self.H < 1 or self.states < 1 or self.actions < 1 or self.d < 1:
            raise InvalidInputError("H, states, actions and d must be positive")
        if not 0 <= self.rate <= 1:
            raise InvalidInputError("rate must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Instance:
    spec: InstanceSpec
    mdp: StagedMdp
    features: FeatureMap
    behavior: Policy
    L2: float
    audit_residual: float


def audit(mdp: StagedMdp, features: FeatureMap):
    """Worst least-squares residual and parameter norm over all deterministic policies."""
    sizes, r, P = mdp.padded
    worst_res, worst_norm = 0.0, 0.0
    for h in range(mdp.horizon):
        tables = kernels.stage_q_tables(h, sizes, r, P)
        tables = np.unique(np.round(tables.reshape(len(tables), -1), 12), axis=0)
        Phi = features.phi[h].reshape(-1, features.dim)
        theta = np.linalg.lstsq(Phi, tables.T, rcond=None)[0]
        worst_res = max(worst_res, float(np.abs(Phi @ theta - tables.T).max()))
        worst_norm = max(worst_norm, float(np.linalg.norm(theta, axis=0).max()))
    return worst_res, worst_norm


def span_features(mdp: StagedMdp, max_dim: int | None = None, tol: float = 1e-10) -> FeatureMap:
    """Orthonormal basis of the span of all deterministic-policy q tables, per stage.

    Every policy's q is a convex combination of deterministic ones, so these
    features realise all policies exactly; row norms are at most one.
    """
    sizes, r, P = mdp.padded
    bases = []
    for h in range(mdp.horizon):
        tables = kernels.stage_q_tables(h, sizes, r, P).reshape(-1, sizes[h] * mdp.num_actions)
        U, S, _ = np.linalg.svd(tables.T, full_matrices=False)
        rank = int(np.sum(S > tol * max(S[0], 1.0))) if S.size else 0
        bases.append(U[:, :rank])
    d = max(1, max(b.shape[1] for b in bases))
    if max_dim is not None and d > max_dim:
        raise InvalidInputError(f"span features need d={d} > {max_dim}")
    phi = []
    for h, b in enumerate(bases):
        block = np.zeros((sizes[h] * mdp.num_actions, d))
        block[:, : b.shape[1]] = b
        phi.append(block.reshape(sizes[h], mdp.num_actions, d))
    phi.append(np.zeros((1, mdp.num_actions, d)))
    return FeatureMap(tuple(phi), 1.0)


def fig1() -> tuple:
    """Two actions; up earns 1 then 0, down earns 0.5 twice, so every policy returns 1."""
    P0 = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    P1 = np.ones((2, 2, 1))
    rewards = (np.array([[1.0, 0.5]]), np.array([[0.0, 0.0], [0.5, 0.5]]), np.zeros((1, 2)))
    mdp = StagedMdp((P0, P1), rewards)
    phi = (np.ones((1, 2, 1)), np.array([[[0.0], [0.0]], [[0.5], [0.5]]]), np.zeros((1, 2, 1)))
    return mdp, FeatureMap(phi, 1.0)


def up_policy(mdp: StagedMdp) -> Policy:
    return Policy.from_actions(mdp, [np.zeros(n, dtype=int) for n in mdp.stage_sizes])


def _stage_sizes(spec):
    return [1] + [spec.states] * (spec.H - 1) + [1]


def linear_mdp_random(spec: InstanceSpec, rng) -> tuple:
    """Simplex features; next-state laws and rewards are linear in them."""
    sizes, A, d = _stage_sizes(spec), spec.actions, spec.d
    transitions, rewards, phi = [], [], []
    for h in range(spec.H):
        f = rng.dirichlet(np.ones(d), size=(sizes[h], A))
        mu = rng.dirichlet(np.ones(sizes[h + 1]), size=d)
        theta_r = rng.uniform(size=d)
        transitions.append(f @ mu)
        rewards.append(f @ theta_r)
        phi.append(f)
    rewards.append(np.zeros((1, A)))
    phi.append(np.zeros((1, A, d)))
    mdp = StagedMdp(tuple(transitions), tuple(rewards), spec.reward_kind)
    return mdp, FeatureMap(tuple(phi), 1.0)


def chain(spec: InstanceSpec, rng) -> tuple:
    """Action 0 continues along the chain, action 1 drops into an absorbing side track."""
    H, A = spec.H, spec.actions
    sizes = [1] + [2] * (H - 1) + [1]
    transitions, rewards = [], []
    for h in range(H):
        n_next = sizes[h + 1]
        P = np.zeros((sizes[h], A, n_next))
        r = np.zeros((sizes[h], A))
        if n_next == 1:
            P[:] = 1.0
        else:
            P[0, 0, 0] = 1.0
            P[0, 1:, 1] = 1.0
            if sizes[h] > 1:
                P[1, :, 1] = 1.0
        r[0, 1:] = 0.5 * (h + 1) / H
        if sizes[h] > 1:
            r[1] = 0.5
        transitions.append(P)
        rewards.append(r)
    rewards.append(np.zeros((1, A)))
    mdp = StagedMdp(tuple(transitions), tuple(rewards), spec.reward_kind)
    return mdp, span_features(mdp, max_dim=max(6, spec.d))


def low_range_injected(spec: InstanceSpec, rng) -> tuple:
    """Random layered MDP with zero-range gadgets.

    A gadget's actions earn different rewards and lead to distinct funnel
    states whose actions all earn the complementary reward and share one
    next-state law, so every action of the gadget has the same value.
    """
    sizes, A, H = _stage_sizes(spec), spec.actions, spec.H
    role = [["normal"] * n for n in sizes]
    gadget_targets = {}
    for h in range(H - 1):
        for s in range(sizes[h]):
            if role[h][s] != "normal" or rng.uniform() >= spec.rate:
                continue
            free = [k for k in range(sizes[h + 1]) if role[h + 1][k] == "normal"]
            if len(free) < A:
                continue
            targets = rng.choice(free, size=A, replace=False)
            role[h][s] = "gadget"
            for k in targets:
                role[h + 1][k] = "funnel"
            gadget_targets[(h, s)] = targets
    funnel_reward = {}
    transitions, rewards = [], []
    for h in range(H):
        n_next = sizes[h + 1]
        P = np.zeros((sizes[h], A, n_next))
        r = np.zeros((sizes[h], A))
        for s in range(sizes[h]):
            if role[h][s] == "gadget":
                c = rng.uniform(0.5, 1.0)
                ra = rng.uniform(0.0, c, size=A)
                for a, k in enumerate(gadget_targets[(h, s)]):
                    P[s, a, k] = 1.0
                    funnel_reward[(h + 1, int(k))] = c - ra[a]
                r[s] = ra
            elif role[h][s] == "funnel":
                P[s] = rng.dirichlet(np.ones(n_next))
                r[s] = funnel_reward[(h, s)]
            else:
                P[s] = rng.dirichlet(np.ones(n_next), size=A)
                r[s] = rng.uniform(size=A)
        transitions.append(P)
        rewards.append(r)
    rewards.append(np.zeros((1, A)))
    mdp = StagedMdp(tuple(transitions), tuple(rewards), spec.reward_kind)
    return mdp, span_features(mdp, max_dim=max(6, spec.d))


def random_tabular(sizes, A: int, rng, reward_kind="deterministic") -> StagedMdp:
    """Unstructured layered MDP (no feature guarantees), for operator identities."""
    sizes = list(sizes)
    transitions = tuple(rng.dirichlet(np.ones(sizes[h + 1]), size=(sizes[h], A)) for h in range(len(sizes) - 1))
    rewards = tuple(rng.uniform(size=(n, A)) for n in sizes[:-1]) + (np.zeros((sizes[-1], A)),)
    return StagedMdp(transitions, rewards, reward_kind)


def random_features(mdp: StagedMdp, d: int, rng, L1: float = 1.0) -> FeatureMap:
    phi = []
    for n in mdp.stage_sizes:
        x = rng.normal(size=(n, mdp.num_actions, d))
        norms = np.linalg.norm(x, axis=2, keepdims=True)
        phi.append(x / np.maximum(norms, 1e-12) * L1 * rng.uniform(size=(n, mdp.num_actions, 1)))
    return FeatureMap(tuple(phi), L1)


_BUILDERS = {"linear_mdp_random": linear_mdp_random, "chain": chain, "low_range_injected": low_range_injected}


def generate(spec: InstanceSpec) -> Instance:
    """Build an instance, audit realizability, and retry with fresh draws on failure."""
    last = None
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        try:
            if spec.kind == "fig1":
                mdp, feats = fig1()
            else:
                mdp, feats = _BUILDERS[spec.kind](spec, rng)
            for h in range(mdp.horizon):
                kernels._check_size(h, mdp.stage_sizes, mdp.num_actions)
        except InvalidInputError as exc:
            last = str(exc)
            continue
        except ValueError as exc:
            raise InvalidInputError(str(exc)) from exc
        res, L2 = audit(mdp, feats)
        if res <= AUDIT_TOL:
            return Instance(spec, mdp, feats, Policy.uniform(mdp), max(L2, 1e-12), res)
        last = f"realizability residual {res:.3e}"
        if spec.kind == "fig1":
            break
    raise InvalidInputError(f"instance generation failed after retries: {last}")
