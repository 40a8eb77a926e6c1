from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_mdp
from skippy.errors import InvalidInputError
from skippy.features import Modification, range_G
from skippy.instances import random_features, up_policy
from skippy.mdp import Policy, backward_q, optimal_q, value
from skippy.skipping import (
    DROP_STOP_FACTOR,
    SkipWeights,
    exact_T_G,
    exact_T_pi_G,
    g_target,
    inject_fault,
    omega,
    omega_from_range,
    q_of_skippy,
    skip_weights,
    skippy_optimal_policy,
    skippy_policy,
    stop_distribution,
)


def _classic_T_pi(mdp, pi, q, h):
    v = np.einsum("sa,sa->s", pi.probs[h + 1], q[h + 1])
    return mdp.rewards[h] + mdp.transitions[h] @ v


def test_omega_branches(fig1_pair):
    mdp, feats = fig1_pair
    G = Modification(0.2, (np.array([[1.0]]), np.array([[1.0]])))
    # identical features across actions: zero range, full skip; terminal never skips
    assert omega(feats, G, 0, 0) == 1.0
    assert omega(feats, G, 2, 0) == 0.0
    alpha, d = 0.3, 2
    assert omega_from_range(0.75 * alpha / math.sqrt(2 * d), alpha, d) == pytest.approx(0.5)


def test_sentinel_never_skips(fig1_pair):
    _, feats = fig1_pair
    skip = skip_weights(feats, Modification.sentinel(0.2, 2, 1))
    assert all(np.all(w == 0) for w in skip.omega)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0.01, 5), st.integers(1, 6))
def test_omega_monotone_in_range(r, alpha, d):
    w = float(omega_from_range(r, alpha, d))
    assert 0 <= w <= 1
    assert float(omega_from_range(r * 1.1 + 1e-3, alpha, d)) <= w + 1e-15


def test_stop_distribution_examples():
    assert stop_distribution([0, 0, 0]).tolist() == [1, 0, 0]
    assert stop_distribution([1, 0, 0]).tolist() == [0, 1, 0]
    assert stop_distribution([0.5, 0.5, 0]) == pytest.approx([0.5, 0.25, 0.25])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_stop_distribution_sums_to_one(ws):
    F = stop_distribution(ws + [0.0])
    assert F.sum() == pytest.approx(1.0) and np.all(F >= 0)


def test_skippy_policy_mixtures(fig1_pair):
    mdp, _ = fig1_pair
    up, b = up_policy(mdp), Policy.uniform(mdp)
    assert all(np.array_equal(a, c) for a, c in zip(skippy_policy(up, b, SkipWeights.constant(mdp, 0)).probs, up.probs))
    mixed = skippy_policy(up, b, SkipWeights.constant(mdp, 1)).probs
    assert all(np.allclose(a, c) for a, c in zip(mixed[:-1], b.probs[:-1]))
    skip = SkipWeights((np.array([0.5]), np.zeros(2), np.zeros(1)))
    assert skippy_policy(up, b, skip).probs[0][0] == pytest.approx([0.75, 0.25])


def test_skippy_optimal_extremes(rng):
    mdp = small_mdp(rng, A=3)
    b = Policy.random(mdp, rng)
    pol, q = skippy_optimal_policy(mdp, b, SkipWeights.constant(mdp, 0))
    q_star, v_star, _ = optimal_q(mdp)
    assert all(np.allclose(x, y) for x, y in zip(q, q_star))
    assert pol.deterministic
    pol, q = skippy_optimal_policy(mdp, b, SkipWeights.constant(mdp, 1))
    qb = backward_q(mdp, b)[0]
    assert all(np.allclose(x, y) for x, y in zip(q, qb))


def test_skippy_optimal_fig1_down_behavior(fig1_pair):
    mdp, _ = fig1_pair
    down = Policy.from_actions(mdp, [np.ones(n, dtype=int) for n in mdp.stage_sizes])
    skip = SkipWeights((np.array([1.0]), np.zeros(2), np.zeros(1)))
    pol, q = skippy_optimal_policy(mdp, down, skip)
    assert value(mdp, pol) == pytest.approx(1.0)


def test_operator_without_skipping_is_classic(rng):
    mdp = small_mdp(rng, H=4, A=3)
    pi, b = Policy.random(mdp, rng), Policy.random(mdp, rng)
    zero = SkipWeights.constant(mdp, 0)
    q = [rng.uniform(0, mdp.horizon, size=r.shape) for r in mdp.rewards]
    q[-1] = np.zeros_like(q[-1])
    for h in range(mdp.horizon):
        assert np.allclose(exact_T_pi_G(mdp, b, zero, pi, q, h), _classic_T_pi(mdp, pi, q, h))
        classic = mdp.rewards[h] + mdp.transitions[h] @ q[h + 1].max(axis=1)
        assert np.allclose(exact_T_G(mdp, b, zero, q, h), classic)


def _random_skip(mdp, rng):
    return SkipWeights(tuple(rng.uniform(size=n) for n in mdp.stage_sizes[:-1]) + (np.zeros(1),))


def test_policy_operator_fixed_point(rng):
    for _ in range(30):
        mdp = small_mdp(rng, H=int(rng.integers(1, 5)), A=int(rng.integers(1, 4)))
        pi, b, skip = Policy.random(mdp, rng), Policy.random(mdp, rng), _random_skip(mdp, rng)
        q = q_of_skippy(mdp, pi, b, skip)
        for h in range(mdp.horizon):
            assert np.abs(exact_T_pi_G(mdp, b, skip, pi, q, h) - q[h]).max() <= 1e-9


def test_optimality_operator_fixed_point(rng):
    for _ in range(30):
        mdp = small_mdp(rng, H=int(rng.integers(1, 5)), A=int(rng.integers(1, 4)))
        b, skip = Policy.random(mdp, rng), _random_skip(mdp, rng)
        _, q = skippy_optimal_policy(mdp, b, skip)
        for h in range(mdp.horizon):
            assert np.abs(exact_T_G(mdp, b, skip, q, h) - q[h]).max() <= 1e-9


def test_fault_breaks_the_fixed_point(rng):
    mdp = small_mdp(rng, H=3)
    pi, b = Policy.random(mdp, rng), Policy.random(mdp, rng)
    skip = SkipWeights.constant(mdp, 0.5)
    q = q_of_skippy(mdp, pi, b, skip)
    with inject_fault(DROP_STOP_FACTOR):
        assert np.abs(exact_T_pi_G(mdp, b, skip, pi, q, 0) - q[0]).max() > 1e-3
    assert np.abs(exact_T_pi_G(mdp, b, skip, pi, q, 0) - q[0]).max() <= 1e-9


def test_single_action_operators_coincide(rng):
    mdp = small_mdp(rng, A=1)
    pi = b = Policy.uniform(mdp)
    skip = _random_skip(mdp, rng)
    q = [rng.uniform(0, mdp.horizon, size=r.shape) for r in mdp.rewards]
    q[-1] = np.zeros_like(q[-1])
    for h in range(mdp.horizon):
        assert np.allclose(exact_T_G(mdp, b, skip, q, h), exact_T_pi_G(mdp, b, skip, pi, q, h))


def test_zero_everything_gives_zero(rng):
    mdp = small_mdp(rng)
    mdp = mdp.with_rewards(tuple(np.zeros_like(r) for r in mdp.rewards))
    q = [np.zeros_like(r) for r in mdp.rewards]
    pi = Policy.uniform(mdp)
    assert np.all(exact_T_pi_G(mdp, pi, _random_skip(mdp, rng), pi, q, 0) == 0)


def test_unclipped_future_rejected(rng):
    mdp = small_mdp(rng)
    pi = Policy.uniform(mdp)
    skip = SkipWeights.constant(mdp, 0)
    q = [np.full(r.shape, mdp.horizon + 1.0) for r in mdp.rewards]
    q[-1] = np.zeros_like(q[-1])
    with pytest.raises(InvalidInputError):
        exact_T_pi_G(mdp, pi, skip, pi, q, 0)
    with pytest.raises(InvalidInputError):
        SkipWeights((np.zeros(1), np.ones(1)))


def test_g_target_reductions():
    # no skipping: reward plus next reduced value
    assert g_target([0.3, 0.2, 0.1, 0.0], [0, 0, 0], [1.5, 9, 0]) == pytest.approx(1.8)
    # skip until the end: the sum of remaining rewards
    assert g_target([0.3, 0.2, 0.1, 0.0], [1, 1, 0], [9, 9, 0]) == pytest.approx(0.6)


def _simulate_suffix(mdp, b, h, s, a, rng):
    states, rewards = [], []
    cur_s, cur_a = s, a
    for u in range(h, mdp.horizon):
        rewards.append(mdp.rewards[u][cur_s, cur_a])
        nxt = rng.choice(mdp.stage_sizes[u + 1], p=mdp.transitions[u][cur_s, cur_a])
        states.append(nxt)
        if u + 1 < mdp.horizon:
            cur_s, cur_a = nxt, rng.choice(mdp.num_actions, p=b.probs[u + 1][nxt])
    rewards.append(0.0)
    return states, rewards


def test_g_target_monte_carlo_matches_operator(rng):
    draws = 4000
    for _ in range(8):
        mdp = small_mdp(rng, H=3, A=2)
        pi, b, skip = Policy.random(mdp, rng), Policy.random(mdp, rng), _random_skip(mdp, rng)
        q = [rng.uniform(0, mdp.horizon, size=r.shape) for r in mdp.rewards]
        q[-1] = np.zeros_like(q[-1])
        red = [np.einsum("sa,sa->s", p, t) for p, t in zip(pi.probs, q)]
        exact = exact_T_pi_G(mdp, b, skip, pi, q, 0)
        s, a = 0, int(rng.integers(mdp.num_actions))
        vals = []
        for _ in range(draws):
            states, rewards = _simulate_suffix(mdp, b, 0, s, a, rng)
            om = [skip.omega[u + 1][x] for u, x in enumerate(states)]
            fut = [red[u + 1][x] for u, x in enumerate(states)]
            vals.append(g_target(rewards, om, fut))
        vals = np.asarray(vals)
        assert 0 <= vals.min() and vals.max() <= 2 * mdp.horizon
        assert abs(vals.mean() - exact[s, a]) <= 3 * vals.std() / math.sqrt(draws) + 1e-12


def test_range_G_drives_weights(rng):
    mdp = small_mdp(rng, A=3)
    feats = random_features(mdp, 2, rng)
    G = Modification(0.5, tuple(rng.normal(size=(2, 2)) for _ in range(mdp.horizon)))
    skip = skip_weights(feats, G)
    for h in range(mdp.horizon):
        assert np.allclose(skip.omega[h], omega_from_range(range_G(feats, G, h), 0.5, 2))
