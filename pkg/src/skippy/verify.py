"""Oracle checks over every module, grouped into suites, with fixed seeds."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .features import Modification, design_size, exact_ranges, fit_table, range_G, true_modification
from .instances import InstanceSpec, generate, random_features, random_tabular, up_policy
from .learners import (
    LearnerConfig,
    StageData,
    fqe,
    greedy_improvement_check,
    population_recursion,
    run_recursion,
)
from .mdp import (
    Policy,
    backward_q,
    change_of_measure_slack,
    concentrability,
    optimal_q,
    performance_difference,
    sample_dataset,
    value,
)
from .profiles import DESK_ALPHA, profile
from .regression import (
    ConfidenceSet,
    StageDesignMatrix,
    beta_radius,
    constrained_ls,
    covariance_concentration_check,
    covariance_slope,
    ellipsoid_extremes,
    lambda_reg,
    ls_objective,
    modified_bound,
)
from .skipping import (
    exact_T_G,
    exact_T_pi_G,
    q_of_skippy,
    skip_weights,
    skippy_optimal_policy,
    skippy_policy,
)

SUITES = ("lemmas", "regression", "learners")


@dataclass
class CheckResult:
    name: str
    suite: str
    passed: bool
    margin: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  [{self.suite}] {self.name}: margin={self.margin:.3e} {self.detail} ({self.seconds:.1f}s)"


def _random_setup(rng):
    """Random tabular MDP, features, behavior and a modification that skips some states partially."""
    H = int(rng.integers(2, 5))
    A = int(rng.integers(2, 4))
    sizes = [1] + [int(rng.integers(1, 4)) for _ in range(H - 1)] + [1]
    mdp = random_tabular(sizes, A, rng)
    d = int(rng.integers(2, 5))
    feats = random_features(mdp, d, rng)
    pts = tuple(rng.normal(size=(int(rng.integers(1, 4)), d)) for _ in range(H))
    probe = Modification(1.0, pts)
    ranges = np.concatenate([range_G(feats, probe, h) for h in range(H)])
    scale = float(np.median(ranges[ranges > 0])) if np.any(ranges > 0) else 1.0
    alpha = math.sqrt(2 * d) * scale * float(rng.uniform(1.0, 2.5))
    G = Modification(alpha, pts)
    behavior = Policy.random(mdp, rng)
    return mdp, feats, behavior, G


def _instances(count: int, seed: int = 0):
    kinds = ("linear_mdp_random", "low_range_injected", "chain", "fig1")
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        spec = InstanceSpec(kind=kind, H=2 + (i % 3), d=2 + (i % 2), seed=seed + i, rate=0.6)
        out.append(generate(spec))
    return out


# ---------------------------------------------------------------- lemma checks


def check_skippy_policy_fixed_point(trials: int = 30, seed: int = 11) -> CheckResult:
    """The skippy policy's q is a fixed point of the exact skippy policy operator."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        mdp, feats, behavior, G = _random_setup(rng)
        skip = skip_weights(feats, G)
        pi = Policy.random(mdp, rng)
        q = q_of_skippy(mdp, pi, behavior, skip)
        for h in range(mdp.horizon):
            worst = max(worst, float(np.abs(exact_T_pi_G(mdp, behavior, skip, pi, q, h) - q[h]).max()))
    return CheckResult("skippy policy q is a fixed point of its operator", "lemmas", worst <= 1e-9, 1e-9 - worst, f"max dev {worst:.2e}")


def check_skippy_optimal_fixed_point(trials: int = 30, seed: int = 12) -> CheckResult:
    """The skippy optimal policy's q is a fixed point of the exact skippy optimality operator."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        mdp, feats, behavior, G = _random_setup(rng)
        skip = skip_weights(feats, G)
        pol, q = skippy_optimal_policy(mdp, behavior, skip)
        q_check = backward_q(mdp, pol)[0]
        for h in range(mdp.horizon):
            worst = max(worst, float(np.abs(exact_T_G(mdp, behavior, skip, q, h) - q[h]).max()))
            worst = max(worst, float(np.abs(q_check[h] - q[h]).max()))
    return CheckResult("skippy optimal q is a fixed point of its operator", "lemmas", worst <= 1e-9, 1e-9 - worst, f"max dev {worst:.2e}")


def check_skip_error(instances: int = 20, policies: int = 50, alphas=(0.2, 0.5), seed: int = 13) -> CheckResult:
    """Following the behavior on skipped states costs at most ``H * alpha`` in value."""
    rng = np.random.default_rng(seed)
    worst = math.inf
    violations = 0
    for k, inst in enumerate(_instances(instances, seed)):
        mdp, feats, b = inst.mdp, inst.features, inst.behavior
        alpha = alphas[k % len(alphas)]
        G, _ = true_modification(mdp, feats, alpha)
        skip = skip_weights(feats, G)
        bound = mdp.horizon * alpha
        for _ in range(policies):
            pi = Policy.random(mdp, rng, deterministic=bool(rng.integers(2)))
            gap = abs(value(mdp, pi) - value(mdp, skippy_policy(pi, b, skip)))
            slack = bound + 1e-9 - gap
            worst = min(worst, slack)
            violations += slack < 0
        pol, _ = skippy_optimal_policy(mdp, b, skip)
        gap = float(optimal_q(mdp)[1][0][0] - value(mdp, pol))
        slack = min(gap + 1e-9, bound + 1e-9 - gap)
        worst = min(worst, slack)
        violations += slack < 0
    return CheckResult("skipping with the correct modification costs at most H*alpha", "lemmas", violations == 0, worst, f"{violations} violations")


def check_range_bound(instances: int = 20, alpha: float = 0.2, seed: int = 14) -> CheckResult:
    """``range(s) <= sqrt(2d) * range_G*(s)`` at every state of every generated instance."""
    worst = math.inf
    violations = 0
    for inst in _instances(instances, seed):
        mdp, feats = inst.mdp, inst.features
        G, _ = true_modification(mdp, feats, alpha)
        ranges = exact_ranges(mdp)
        for h in range(mdp.horizon):
            slack = math.sqrt(2 * feats.dim) * range_G(feats, G, h) + 1e-8 - ranges[h]
            worst = min(worst, float(slack.min()))
            violations += int(np.sum(slack < 0))
    return CheckResult("true range is bounded by the design range", "lemmas", violations == 0, worst, f"{violations} violations")


def check_completeness(futures: int = 20, alpha: float = DESK_ALPHA, seed: int = 15, instances: int = 4) -> CheckResult:
    """Skippy backups of arbitrary bounded futures under the correct modification are linear."""
    rng = np.random.default_rng(seed)
    worst_res, worst_ratio = 0.0, 0.0
    for inst in _instances(instances, seed):
        mdp, feats, b = inst.mdp, inst.features, inst.behavior
        G, _ = true_modification(mdp, feats, alpha)
        skip = skip_weights(feats, G)
        H = mdp.horizon
        L2p = modified_bound(inst.L2, H, design_size(feats.dim), alpha)
        for _ in range(futures):
            q = [rng.uniform(0, H, size=r.shape) for r in mdp.rewards]
            q[H] = np.zeros_like(q[H])
            pe = Policy.random(mdp, rng)
            for h in range(H):
                for T in (exact_T_G(mdp, b, skip, q, h), exact_T_pi_G(mdp, b, skip, pe, q, h)):
                    theta, res, _ = fit_table(feats, h, T)
                    worst_res = max(worst_res, res)
                    worst_ratio = max(worst_ratio, float(np.linalg.norm(theta)) / L2p)
    ok = worst_res <= 1e-6 and worst_ratio <= 1.0
    return CheckResult("skippy backups stay in the enlarged linear class", "lemmas", ok, 1e-6 - worst_res, f"residual {worst_res:.2e}, norm/bound {worst_ratio:.3g}")


def check_performance_difference(trials: int = 20, seed: int = 16) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        sizes = [1] + [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4)))] + [1]
        mdp = random_tabular(sizes, int(rng.integers(2, 4)), rng)
        worst = max(worst, performance_difference(mdp, Policy.random(mdp, rng), Policy.random(mdp, rng)))
    return CheckResult("performance difference identity", "lemmas", worst <= 1e-9, 1e-9 - worst, f"max residual {worst:.2e}")


def check_change_of_measure(trials: int = 50, seed: int = 17) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    violations = 0
    for _ in range(trials):
        sizes = [1] + [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4)))] + [1]
        mdp = random_tabular(sizes, int(rng.integers(2, 4)), rng)
        b = Policy.random(mdp, rng)
        cstar = concentrability(mdp, b)
        f = [rng.exponential(size=r.shape) for r in mdp.rewards]
        slack = change_of_measure_slack(mdp, b, Policy.random(mdp, rng, deterministic=True), f, cstar)
        tol = 1e-9 * max(1.0, cstar)
        worst = max(worst, slack)
        violations += slack > tol
    return CheckResult("occupancy change of measure", "lemmas", violations == 0, 0.0 - worst, f"{violations} violations")


def check_policy_improvement(trials: int = 50, kappas=(0.0, 0.1, 0.5), seed: int = 18) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    violations = 0
    for kappa in kappas:
        for _ in range(trials):
            sizes = [1] + [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4)))] + [1]
            mdp = random_tabular(sizes, int(rng.integers(2, 4)), rng)
            pi = Policy.random(mdp, rng)
            q = backward_q(mdp, pi)[0]
            qp = [t + rng.uniform(-kappa, kappa, size=t.shape) for t in q]
            ok, slack = greedy_improvement_check(mdp, pi, qp, kappa, rng, trials=10)
            worst = max(worst, slack)
            violations += not ok
    return CheckResult("greedy policy on a perturbed q loses at most 2(H-h+1)kappa", "lemmas", violations == 0, 0.0 - worst, f"{violations} violations")


# ---------------------------------------------------------------- regression checks


def check_constrained_ls(trials: int = 20, seed: int = 21) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(trials):
        d = int(rng.integers(1, 5))
        X = rng.normal(size=(40, d))
        y = X @ rng.normal(scale=3, size=d) + rng.normal(size=40)
        bound, lam = float(rng.uniform(0.2, 3)), float(rng.uniform(0.01, 1))
        theta = constrained_ls(X, y, bound, lam)
        best = ls_objective(X, y, theta, lam)
        probes = rng.normal(size=(100, d))
        probes *= (bound * rng.uniform(size=(100, 1)) ** (1 / d)) / np.linalg.norm(probes, axis=1, keepdims=True)
        gap = min(ls_objective(X, y, p, lam) for p in probes) - best
        worst = min(worst, gap, bound + 1e-9 - float(np.linalg.norm(theta)))
    return CheckResult("ball-constrained ridge is feasible and beats random feasible probes", "regression", worst >= -1e-9, worst)


def check_ellipsoid_extremes(trials: int = 10, samples: int = 1000, seed: int = 22) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = math.inf
    H = 3.0
    for _ in range(trials):
        d = int(rng.integers(1, 4))
        design = StageDesignMatrix(rng.normal(size=(10, d)), float(rng.uniform(0.1, 1)))
        bound = float(rng.uniform(0.5, 2))
        c = rng.normal(size=d)
        c *= min(1, 0.8 * bound / np.linalg.norm(c))
        cs = ConfidenceSet(c, float(rng.uniform(0.5, 4)), design, bound)
        phi = rng.normal(size=d)
        lo, hi = ellipsoid_extremes(cs, phi, H)
        z = rng.normal(size=(samples * 4, d))
        z = z / np.linalg.norm(z, axis=1, keepdims=True) * rng.uniform(size=(len(z), 1)) ** (1 / d)
        thetas = c + cs.beta * np.linalg.solve(np.linalg.cholesky(design.matrix).T, z.T).T
        thetas = thetas[np.linalg.norm(thetas, axis=1) <= bound][:samples]
        vals = np.clip(thetas @ phi, 0, H)
        worst = min(worst, float(np.min(vals - lo)) if len(vals) else 0.0, float(np.min(hi - vals)) if len(vals) else 0.0)
    return CheckResult("set extremes bracket sampled members", "regression", worst >= -1e-9, worst)


def check_elliptical_norm(trials: int = 20, seed: int = 23) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 6))
        design = StageDesignMatrix(rng.normal(size=(20, d)), float(rng.uniform(0.1, 2)))
        v = rng.normal(size=d)
        dense = math.sqrt(v @ np.linalg.inv(design.matrix) @ v)
        worst = max(worst, abs(design.inverse_norms(v)[0] - dense))
    return CheckResult("elliptical norm matches the dense inverse", "regression", worst <= 1e-10, 1e-10 - worst)


def check_covariance(seeds: int = 100, n: int = 4096, spec: InstanceSpec = InstanceSpec(), delta: float = 0.05, slope_ns=None) -> CheckResult:
    inst = generate(spec)
    d, H = inst.features.dim, inst.mdp.horizon
    lam = lambda_reg(H, d, modified_bound(inst.L2, H, design_size(d), DESK_ALPHA))
    rep = covariance_concentration_check(inst.mdp, inst.behavior, inst.features, n, range(seeds), lam, delta)
    ns = slope_ns or [2**k for k in range(8, 15)]
    slope = covariance_slope(inst.mdp, inst.behavior, inst.features, ns, range(10), lam)
    ok = rep["passes"] and abs(slope + 1) <= 0.1
    return CheckResult(
        "feature covariance concentrates at rate 15d/n", "regression", ok, min(rep["fraction"] - (1 - delta), 0.1 - abs(slope + 1)),
        f"fraction {rep['fraction']:.2f}, slope {slope:.3f}",
    )


def check_beta_monotone() -> CheckResult:
    args = dict(H=3, d=3, d0=16, L1=1.0, L2=2.0, delta=0.1)
    worst = math.inf
    for alpha in (0.1, 0.5):
        L2p = modified_bound(2.0, 3, 16, alpha)
        lam = lambda_reg(3, 3, L2p)
        vals = [beta_radius(L2p=L2p, alpha=alpha, lam=lam, n=n, **args) for n in (64, 256, 1024, 4096)]
        worst = min(worst, float(np.min(np.diff(vals))))
    # smaller alpha widens the set for a fixed enlarged bound
    L2p = modified_bound(2.0, 3, 16, 0.5)
    lam = lambda_reg(3, 3, L2p)
    diff = beta_radius(L2p=L2p, alpha=0.1, lam=lam, n=512, **args) - beta_radius(L2p=L2p, alpha=0.5, lam=lam, n=512, **args)
    worst = min(worst, diff)
    return CheckResult("confidence radius grows with n and shrinks with alpha", "regression", worst > 0, worst)


# ---------------------------------------------------------------- learner checks


def check_exact_chain(seed: int = 31) -> CheckResult:
    """Noise-free recursions reproduce the exact skippy values."""
    worst = 0.0
    for inst in _instances(4, seed):
        mdp, feats, b = inst.mdp, inst.features, inst.behavior
        G, _ = true_modification(mdp, feats, DESK_ALPHA)
        skip = skip_weights(feats, G)
        pe = up_policy(mdp)
        _, _, v_eval = population_recursion(mdp, feats, G, "eval", b, pe)
        worst = max(worst, abs(v_eval - value(mdp, skippy_policy(pe, b, skip))))
        _, q, _ = population_recursion(mdp, feats, G, "opt", b)
        q_star = skippy_optimal_policy(mdp, b, skip)[1]
        worst = max(worst, max(float(np.abs(q[h] - q_star[h]).max()) for h in range(mdp.horizon)))
    return CheckResult("noise-free recursion equals the exact skippy chain", "learners", worst <= 1e-6, 1e-6 - worst)


def check_no_skip_is_fqe(seed: int = 32) -> CheckResult:
    inst = generate(InstanceSpec(seed=seed))
    mdp, feats, b = inst.mdp, inst.features, inst.behavior
    pe = up_policy(mdp)
    cfg = LearnerConfig(L2=inst.L2, cstar=concentrability(mdp, b), alpha=DESK_ALPHA, multipliers=profile("desk"), pi_e=pe, pi_b=b)
    ds = sample_dataset(mdp, b, 2048, seed)
    consts = cfg.constants("eval", feats, mdp.horizon, mdp.num_actions, ds.n)
    rec = run_recursion(StageData.build(ds, feats), feats, Modification.sentinel(DESK_ALPHA, mdp.horizon, feats.dim), consts, "eval", pe)
    ref = fqe(ds, feats, pe, consts.lam, consts.L2p)
    dev = float(np.abs(rec.thetas - ref).max())
    return CheckResult("no-skip recursion is fitted Q evaluation", "learners", dev <= 1e-9, 1e-9 - dev)


def check_determinism(seed: int = 33) -> CheckResult:
    from .experiment import RunConfig, run_once

    cfg = RunConfig(instance=InstanceSpec(kind="fig1"), n=512, seed=seed, alpha=DESK_ALPHA)
    a, b = run_once(cfg), run_once(cfg)
    same = repr(sorted(a.items())) == repr(sorted(b.items()))
    return CheckResult("identical runs give identical rows", "learners", same, 0.0 if same else -1.0)


CHECKS = {
    "lemmas": (
        check_skippy_policy_fixed_point,
        check_skippy_optimal_fixed_point,
        check_skip_error,
        check_range_bound,
        check_completeness,
        check_performance_difference,
        check_change_of_measure,
        check_policy_improvement,
    ),
    "regression": (
        check_constrained_ls,
        check_ellipsoid_extremes,
        check_elliptical_norm,
        check_beta_monotone,
        check_covariance,
    ),
    "learners": (check_exact_chain, check_no_skip_is_fqe, check_determinism),
}


def run_suite(suite: str = "all") -> list:
    if suite != "all" and suite not in CHECKS:
        raise ValueError(f"unknown suite {suite!r}; choose from {list(CHECKS) + ['all']}")
    names = list(CHECKS) if suite == "all" else [suite]
    results = []
    for name in names:
        for fn in CHECKS[name]:
            t0 = time.perf_counter()
            try:
                res = fn()
            except Exception as exc:  # a crashing oracle is a failed check
                res = CheckResult(fn.__name__, name, False, -math.inf, f"raised {type(exc).__name__}: {exc}")
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return results
