from __future__ import annotations

import numpy as np
import pytest

from conftest import small_mdp
from skippy.errors import ConfigError, EmptyFilterError
from skippy.features import Modification, true_modification
from skippy.instances import InstanceSpec, generate, up_policy
from skippy.learners import (
    CandidateFamily,
    GRecursion,
    LearnerConfig,
    StageData,
    build_family,
    eval_learner,
    filter_G,
    fqe,
    greedy_improvement_check,
    opt_learner,
    population_recursion,
    run_recursion,
)
from skippy.mdp import Policy, backward_q, concentrability, optimal_q, sample_dataset, value
from skippy.profiles import DESK_ALPHA, profile
from skippy.regression import Multipliers
from skippy.skipping import exact_T_G, q_of_skippy, skip_weights, skippy_policy


def _config(inst, mode="eval", mult="desk", **kw):
    pi_e = up_policy(inst.mdp) if mode == "eval" else None
    m = profile(mult) if isinstance(mult, str) else mult
    return LearnerConfig(
        L2=inst.L2, cstar=concentrability(inst.mdp, inst.behavior), alpha=DESK_ALPHA, multipliers=m,
        pi_e=pi_e, pi_b=inst.behavior, **kw,
    )


@pytest.fixture(scope="module")
def fig1_inst():
    return generate(InstanceSpec(kind="fig1"))


@pytest.fixture(scope="module")
def fig1_oracle(fig1_inst):
    return true_modification(fig1_inst.mdp, fig1_inst.features, DESK_ALPHA)[0]


def test_sample_recursion_matches_exact_chain_on_deterministic_instance(fig1_inst, fig1_oracle):
    # fig1 has deterministic dynamics, so the targets are exactly linear
    mdp, feats, b = fig1_inst.mdp, fig1_inst.features, fig1_inst.behavior
    ds = sample_dataset(mdp, b, 1 << 16, 0)
    data = StageData.build(ds, feats)
    skip = skip_weights(feats, fig1_oracle)
    pe = up_policy(mdp)
    cfg = _config(fig1_inst, mult=Multipliers(beta=0.0))
    consts = cfg.constants("eval", feats, mdp.horizon, mdp.num_actions, ds.n)
    rec = run_recursion(data, feats, fig1_oracle, consts, "eval", pe)
    exact = q_of_skippy(mdp, pe, b, skip)
    for h in range(mdp.horizon):
        assert np.abs(rec.q_table(feats, h) - exact[h]).max() <= 1e-6
    assert np.all(rec.widths == 0)

    rec = run_recursion(data, feats, fig1_oracle, cfg.constants("opt", feats, 2, 2, ds.n), "opt")
    q = [np.zeros_like(r) for r in mdp.rewards]
    for h in range(mdp.horizon - 1, -1, -1):
        q[h] = exact_T_G(mdp, b, skip, q, h)
        assert np.abs(rec.q_table(feats, h) - q[h]).max() <= 1e-6


def test_zero_reward_recursion(linear_instance):
    inst = linear_instance
    mdp = inst.mdp.with_rewards(tuple(np.zeros_like(r) for r in inst.mdp.rewards))
    ds = sample_dataset(mdp, inst.behavior, 512, 1)
    data = StageData.build(ds, inst.features)
    cfg = _config(inst)
    consts = cfg.constants("eval", inst.features, 3, 2, ds.n)
    rec = run_recursion(data, inst.features, Modification.sentinel(DESK_ALPHA, 3, 3), consts, "eval", up_policy(mdp),
                        set_mode="canonical")
    assert np.allclose(rec.thetas, 0)
    for h in range(3):
        assert rec.widths[h] <= consts.beta * rec.designs[h].inverse_norms(data.rows[h]).max() * 2 + 1e-12


def test_no_skip_recursion_is_fqe(linear_instance):
    inst = linear_instance
    pe = up_policy(inst.mdp)
    ds = sample_dataset(inst.mdp, inst.behavior, 1024, 2)
    cfg = _config(inst)
    consts = cfg.constants("eval", inst.features, 3, 2, ds.n)
    rec = run_recursion(StageData.build(ds, inst.features), inst.features,
                        Modification.sentinel(DESK_ALPHA, 3, 3), consts, "eval", pe)
    assert np.abs(rec.thetas - fqe(ds, inst.features, pe, consts.lam, consts.L2p)).max() <= 1e-9


def test_filter_accepts_all_with_zero_radius(fig1_inst, fig1_oracle):
    inst = fig1_inst
    fam = build_family(fig1_oracle, inst.L2, 1, 2, DESK_ALPHA)
    ds = sample_dataset(inst.mdp, inst.behavior, 256, 3)
    cfg = _config(inst, mult=Multipliers(beta=0.0))
    consts = cfg.constants("eval", inst.features, 2, 2, ds.n)
    recs = [run_recursion(StageData.build(ds, inst.features), inst.features, G, consts, "eval", up_policy(inst.mdp))
            for G in fam]
    assert filter_G(recs, 0.0) == list(range(len(fam)))


def test_filter_empty_raises():
    rec = GRecursion(Modification.sentinel(0.2, 1, 1), np.zeros((2, 1)), (), np.array([0.5]), 1.0)
    with pytest.raises(EmptyFilterError) as info:
        filter_G([rec], 0.1)
    assert info.value.worst_widths == {"no-skip": 0.5}


def test_hard_instance_rejects_sentinel():
    inst = generate(InstanceSpec(kind="low_range_injected", rate=1.0, seed=2000))
    G, _ = true_modification(inst.mdp, inst.features, DESK_ALPHA)
    cfg = _config(inst)
    ds = sample_dataset(inst.mdp, inst.behavior, 8192, 2001)
    consts = cfg.constants("eval", inst.features, inst.mdp.horizon, inst.mdp.num_actions, ds.n)
    data = StageData.build(ds, inst.features)
    H, d = inst.mdp.horizon, inst.features.dim
    sent = run_recursion(data, inst.features, Modification.sentinel(DESK_ALPHA, H, d), consts, "eval", up_policy(inst.mdp))
    good = run_recursion(data, inst.features, G, consts, "eval", up_policy(inst.mdp))
    assert sent.worst_width > good.worst_width


def test_eval_learner_on_fig1(fig1_inst, fig1_oracle):
    inst = fig1_inst
    fam = build_family(fig1_oracle, inst.L2, 1, 2, DESK_ALPHA)
    res = eval_learner(sample_dataset(inst.mdp, inst.behavior, 8192, 1001), inst.features, _config(inst), fam)
    assert abs(res.value - 1.0) <= 0.05
    assert 0 in res.accepted
    man = res.manifest()
    assert man["chosen_tag"] == fam.tags[res.chosen] and len(man["candidates"]) == len(fam)


def test_eval_with_target_equal_to_behavior(linear_instance):
    inst = linear_instance
    cfg = _config(inst, mult=Multipliers(beta=0.0))
    cfg = LearnerConfig(**{**cfg.__dict__, "pi_e": inst.behavior})
    G, _ = true_modification(inst.mdp, inst.features, DESK_ALPHA)
    ds = sample_dataset(inst.mdp, inst.behavior, 4096, 5)
    res = eval_learner(ds, inst.features, cfg, CandidateFamily((G, Modification.sentinel(DESK_ALPHA, 3, 3))))
    assert res.scores == [0.0, 0.0]
    fq = fqe(ds, inst.features, inst.behavior, res.constants.lam, res.constants.L2p)
    v_fqe = float(inst.behavior.probs[0][0] @ np.clip(inst.features.phi[0][0] @ fq[0], 0, 3))
    assert res.start_values[1] == pytest.approx(v_fqe, abs=1e-9)
    assert abs(res.value - value(inst.mdp, inst.behavior)) <= 0.05


def test_population_recursion_matches_skippy_value(linear_instance):
    inst = linear_instance
    G, _ = true_modification(inst.mdp, inst.features, DESK_ALPHA)
    pe = up_policy(inst.mdp)
    _, _, start = population_recursion(inst.mdp, inst.features, G, "eval", inst.behavior, pe)
    exact = value(inst.mdp, skippy_policy(pe, inst.behavior, skip_weights(inst.features, G)))
    assert start == pytest.approx(exact, abs=1e-6)


def test_opt_learner_fig1(fig1_inst, fig1_oracle):
    inst = fig1_inst
    fam = build_family(fig1_oracle, inst.L2, 1, 2, DESK_ALPHA)
    res = opt_learner(sample_dataset(inst.mdp, inst.behavior, 1024, 7), inst.features, _config(inst, "opt"), fam)
    assert value(inst.mdp, res.policy) == pytest.approx(1.0)


def test_opt_learner_zero_rewards(linear_instance):
    inst = linear_instance
    mdp = inst.mdp.with_rewards(tuple(np.zeros_like(r) for r in inst.mdp.rewards))
    ds = sample_dataset(mdp, inst.behavior, 512, 0)
    res = opt_learner(ds, inst.features, _config(inst, "opt", "desk-opt"),
                      CandidateFamily((Modification.sentinel(DESK_ALPHA, 3, 3),)))
    assert value(mdp, res.policy) == 0.0 == optimal_q(mdp)[1][0][0]


def test_opt_learner_recovers_optimal_policy(linear_instance):
    inst = linear_instance
    G, _ = true_modification(inst.mdp, inst.features, DESK_ALPHA)
    ds = sample_dataset(inst.mdp, inst.behavior, 8192, 1002)
    res = opt_learner(ds, inst.features, _config(inst, "opt", "desk-opt"), CandidateFamily((G,)))
    assert value(inst.mdp, res.policy) == pytest.approx(optimal_q(inst.mdp)[1][0][0], abs=1e-12)


def test_family_structure(fig1_oracle):
    fam = build_family(fig1_oracle, 1.0, 1, 2, DESK_ALPHA, n_random=2)
    assert fam.tags == ["oracle-G*", "perturbed-0.1", "perturbed-0.5", "perturbed-1", "random-0", "random-1", "no-skip"]
    for G in fam:
        G.check_bound(1.0)
    again = build_family(fig1_oracle, 1.0, 1, 2, DESK_ALPHA, n_random=2)
    assert all(np.array_equal(a, b) for G, H in zip(fam, again) for a, b in zip(G.per_stage, H.per_stage))


def test_config_errors(fig1_inst, fig1_oracle):
    inst = fig1_inst
    ds = sample_dataset(inst.mdp, inst.behavior, 64, 0)
    fam = CandidateFamily((fig1_oracle,))
    bad = LearnerConfig(L2=1.0, cstar=1.0, alpha=DESK_ALPHA)
    with pytest.raises(ConfigError):
        eval_learner(ds, inst.features, bad, fam)
    with pytest.raises(ConfigError):
        opt_learner(ds, inst.features, _config(inst, "opt", eps=1.5), fam)
    with pytest.raises(ConfigError):
        opt_learner(ds, inst.features, _config(inst, "opt", set_mode="set"), fam)
    other = CandidateFamily((Modification(0.7, fig1_oracle.per_stage),))
    with pytest.raises(ConfigError):
        opt_learner(ds, inst.features, _config(inst, "opt"), other)


def test_greedy_improvement(rng):
    for kappa in (0.0, 0.1, 0.5):
        for _ in range(20):
            mdp = small_mdp(rng, A=3)
            pi = Policy.random(mdp, rng)
            q = backward_q(mdp, pi)[0]
            noisy = [t + rng.uniform(-kappa, kappa, size=t.shape) for t in q]
            ok, worst = greedy_improvement_check(mdp, pi, noisy, kappa, rng, trials=5)
            assert ok, worst


def test_canonical_widths_do_not_exceed_propagated(linear_instance):
    inst = linear_instance
    G, _ = true_modification(inst.mdp, inst.features, DESK_ALPHA)
    ds = sample_dataset(inst.mdp, inst.behavior, 2048, 4)
    data = StageData.build(ds, inst.features)
    consts = _config(inst).constants("eval", inst.features, 3, 2, ds.n)
    pe = up_policy(inst.mdp)
    a = run_recursion(data, inst.features, G, consts, "eval", pe, set_mode="canonical")
    b = run_recursion(data, inst.features, G, consts, "eval", pe)
    assert np.allclose(a.thetas, b.thetas)
    assert np.all(a.widths <= b.widths + 1e-9)
