"""Acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.  Seeds here (1000 and up) are disjoint from the seeds
used to calibrate the desk profiles.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from skippy import cli
from skippy import verify as V
from skippy.experiment import RunConfig, SweepPlan, run_sweep
from skippy.features import Modification, true_modification
from skippy.instances import InstanceSpec, generate, up_policy
from skippy.learners import LearnerConfig, StageData, run_recursion
from skippy.mdp import concentrability, sample_dataset
from skippy.profiles import DESK_ALPHA, profile

SEED0 = 1000


def report(number: int, ok: bool, detail: str, seconds: float):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def _check(number, check, budget=None):
    res, secs = _timed(check)
    ok = res.passed and (budget is None or secs < budget)
    budget_note = f", budget {budget:.0f}s" if budget else ""
    report(number, ok, f"{res.name}: {res.detail} margin={res.margin:.3g}{budget_note}", secs)


def test_criterion_01_policy_operator_identity():
    _check(1, lambda: V.check_skippy_policy_fixed_point(trials=30, seed=SEED0 + 1), budget=10)


def test_criterion_02_optimality_operator_identity():
    _check(2, lambda: V.check_skippy_optimal_fixed_point(trials=30, seed=SEED0 + 2))


def test_criterion_03_skip_error_bound():
    _check(3, lambda: V.check_skip_error(instances=20, policies=50, seed=SEED0 + 3))


def test_criterion_04_range_bound():
    _check(4, lambda: V.check_range_bound(instances=20, seed=SEED0 + 4))


def test_criterion_05_completeness():
    _check(5, lambda: V.check_completeness(futures=20, seed=SEED0 + 5))


def test_criterion_06_covariance_bound():
    _check(6, lambda: V.check_covariance(seeds=100, n=4096), budget=120)


def test_criterion_07_identities():
    (pd, cm), secs = _timed(
        lambda: (V.check_performance_difference(20, SEED0 + 7), V.check_change_of_measure(50, SEED0 + 7))
    )
    report(7, pd.passed and cm.passed, f"performance difference {pd.detail}; change of measure {cm.detail}", secs)


def _median_errors(rows, grid):
    return [float(np.median([r["error"] for r in rows if r["n"] == n])) for n in grid]


def test_criterion_08_eval_end_to_end():
    base = RunConfig(instance=InstanceSpec(kind="fig1"), mode="eval", alpha=DESK_ALPHA, profile="desk", target="up")
    rows, secs = _timed(run_sweep, SweepPlan(base, (512, 8192), 50, seed_offset=SEED0))
    ok_rows = all(r["status"] == "ok" for r in rows)
    small, big = _median_errors(rows, (512, 8192))
    ok = ok_rows and big <= 0.05 and big < small and secs < 300
    report(8, ok, f"median |v-1|: n=512 {small:.3g}, n=8192 {big:.3g} (<= 0.05 and decreasing)", secs)


def test_criterion_09_opt_end_to_end():
    spec = InstanceSpec(kind="linear_mdp_random", d=3, H=4, reward_kind="bernoulli")
    base = RunConfig(instance=spec, mode="opt", alpha=DESK_ALPHA, profile="desk-opt")
    grid = (128, 256, 512, 2048, 8192)
    rows, secs = _timed(run_sweep, SweepPlan(base, grid, 50, seed_offset=SEED0))
    v_star = rows[0]["oracle"]
    med = _median_errors(rows, grid)
    monotone = all(b <= a for a, b in zip(med, med[1:]))
    ok = all(r["status"] == "ok" for r in rows) and med[-1] <= 0.05 * v_star and monotone
    trend = ", ".join(f"{n}:{m:.3g}" for n, m in zip(grid, med))
    report(9, ok, f"median regret by n [{trend}], v*={v_star:.3f}", secs)


def _filter_outcomes(spec, seeds, n=8192):
    inst = generate(spec)
    mdp, feats, b = inst.mdp, inst.features, inst.behavior
    G, _ = true_modification(mdp, feats, DESK_ALPHA)
    pe = up_policy(mdp)
    cfg = LearnerConfig(L2=inst.L2, cstar=concentrability(mdp, b), alpha=DESK_ALPHA, multipliers=profile("desk"),
                        pi_e=pe, pi_b=b)
    consts = cfg.constants("eval", feats, mdp.horizon, mdp.num_actions, n)
    sentinel = Modification.sentinel(DESK_ALPHA, mdp.horizon, feats.dim)
    accepted = rejected = 0
    for s in seeds:
        data = StageData.build(sample_dataset(mdp, b, n, s), feats)
        accepted += run_recursion(data, feats, G, consts, "eval", pe).worst_width <= consts.eps_bar
        rejected += run_recursion(data, feats, sentinel, consts, "eval", pe).worst_width > consts.eps_bar
    return accepted, rejected


def test_criterion_10_filter_sanity():
    t0 = time.perf_counter()
    seeds = range(SEED0, SEED0 + 100)
    acc_fig1, _ = _filter_outcomes(InstanceSpec(kind="fig1"), seeds)
    acc_hard, rej_hard = _filter_outcomes(InstanceSpec(kind="low_range_injected", rate=1.0, seed=SEED0), seeds)
    ok = acc_fig1 >= 95 and acc_hard >= 95 and rej_hard >= 80
    report(
        10, ok,
        f"G* accepted fig1 {acc_fig1}/100, hard instance {acc_hard}/100; no-skip rejected on hard instance {rej_hard}/100",
        time.perf_counter() - t0,
    )


def test_criterion_11_policy_improvement():
    _check(11, lambda: V.check_policy_improvement(trials=50, seed=SEED0 + 11))


def test_criterion_12_sweep_determinism(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({
        "instance": {"kind": "fig1"}, "alpha": DESK_ALPHA, "family": "oracle,perturbed,random:2,sentinel",
        "sweep": {"n_grid": [256, 1024], "seeds": 4, "seed_offset": SEED0},
    }))
    t0 = time.perf_counter()
    outs = []
    for i, workers in enumerate(("1", "3")):
        path = tmp_path / f"run{i}.csv"
        code = cli.main(["sweep", "--config", str(plan), "--out", str(path), "--workers", workers])
        outs.append((code, path.read_bytes()))
    ok = outs[0][0] == outs[1][0] == 0 and outs[0][1] == outs[1][1]
    report(12, ok, f"two sweeps ({len(outs[0][1])} bytes) byte-identical: {outs[0][1] == outs[1][1]}", time.perf_counter() - t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
