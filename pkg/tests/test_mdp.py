import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pacle.benchmarks import random_tabular_mdp
from pacle.mdp import (MixturePolicy, SoftmaxPolicy, TabularLinearMdp, TabularPolicy,
                       ValidationError, evaluate_policy_exact, lift_weights, occupancy_features,
                       optimal_values, rollout, softmax_masked, state_occupancy)

from conftest import tiny_mdp


def enumerate_value(mdp, policy):
    """Brute-force expectation over every trajectory (independent of the DP code)."""
    H = mdp.horizon
    total = 0.0

    def walk(h, s, prob):
        nonlocal total
        p = policy.probs(mdp, h)[s]
        for a in range(mdp.n_actions(h)):
            if p[a] == 0:
                continue
            total += prob * p[a] * mdp.rewards[h][s, a]
            if h < H - 1:
                for sp in range(mdp.n_states(h + 1)):
                    q = mdp.transitions[h][s, a, sp]
                    if q > 0:
                        walk(h + 1, sp, prob * p[a] * q)

    walk(0, mdp.initial_state, 1.0)
    return total


def test_rejects_large_features():
    m = tiny_mdp()
    f = [np.array(x) for x in m.features]
    f[0] = f[0] * 1.5
    with pytest.raises(ValidationError, match="feature norm"):
        TabularLinearMdp(tuple(f), m.transitions, m.rewards, m.action_mask)


def test_rejects_rows_not_summing_to_one():
    m = tiny_mdp()
    P = np.array(m.transitions[0])
    P[0, 0] = [0.7, 0.3 + 1e-9]
    with pytest.raises(ValidationError, match="sum to one"):
        TabularLinearMdp(m.features, (P,), m.rewards, m.action_mask)


def test_rejects_negative_transition_and_big_reward():
    m = tiny_mdp()
    P = np.array(m.transitions[0])
    P[0, 0] = [1.2, -0.2]
    with pytest.raises(ValidationError, match="negative"):
        TabularLinearMdp(m.features, (P,), m.rewards, m.action_mask)
    r = [np.array(x) for x in m.rewards]
    r[1][0, 0] = 1.5
    with pytest.raises(ValidationError, match="reward"):
        TabularLinearMdp(m.features, m.transitions, tuple(r), m.action_mask)


def test_rejects_wrong_transition_count():
    m = tiny_mdp()
    with pytest.raises(ValidationError):
        TabularLinearMdp(m.features, (), m.rewards, m.action_mask)


def test_save_load_roundtrip(tmp_path):
    m = tiny_mdp()
    m.save(tmp_path / "m.json")
    back = TabularLinearMdp.load(tmp_path / "m.json")
    for a, b in zip(m.features + m.rewards + m.transitions, back.features + back.rewards + back.transitions):
        np.testing.assert_array_equal(a, b)
    assert back.reward_noise == m.reward_noise


def test_load_rejects_other_formats():
    with pytest.raises(ValidationError):
        TabularLinearMdp.from_dict({"format": "something_else"})


def test_softmax_is_stable_for_huge_logits():
    p = softmax_masked(np.array([[1e6, 1e6 - 1.0, -1e6]]), np.ones((1, 3), bool))
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p[0, :2], [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])


def test_softmax_respects_mask():
    p = softmax_masked(np.array([[5.0, 1.0, 2.0]]), np.array([[False, True, True]]))
    assert p[0, 0] == 0.0
    assert p.sum() == pytest.approx(1.0)


def test_dp_matches_trajectory_enumeration(rng):
    for _ in range(20):
        m = random_tabular_mdp(rng)
        pol = SoftmaxPolicy(tuple(rng.normal(size=d) for d in m.dims))
        assert evaluate_policy_exact(m, pol).v1 == pytest.approx(enumerate_value(m, pol), abs=1e-12)


def test_optimal_value_dominates_every_deterministic_policy(rng):
    for _ in range(10):
        m = random_tabular_mdp(rng, max_states=2, max_actions=2, max_horizon=3)
        vstar, greedy = optimal_values(m)
        best = -np.inf
        choices = [list(itertools.product(*[np.flatnonzero(row) for row in mask])) for mask in m.action_mask]
        for acts in itertools.product(*choices):
            best = max(best, evaluate_policy_exact(m, TabularPolicy.deterministic(m, acts)).v1)
        assert vstar.v1 == pytest.approx(best, abs=1e-12)
        assert evaluate_policy_exact(m, greedy).v1 == pytest.approx(vstar.v1, abs=1e-12)


def test_mixture_value_is_member_average(rng):
    m = tiny_mdp()
    members = [SoftmaxPolicy(tuple(rng.normal(size=d) for d in m.dims)) for _ in range(3)]
    mix = MixturePolicy(tuple(members))
    want = np.mean([evaluate_policy_exact(m, p).v1 for p in members])
    assert evaluate_policy_exact(m, mix).v1 == pytest.approx(want, abs=1e-14)


def test_occupancy_is_a_distribution_per_stage(rng):
    m = random_tabular_mdp(rng, max_horizon=3)
    for occ in state_occupancy(m, TabularPolicy.uniform(m)):
        assert occ.sum() == pytest.approx(1.0)
        assert (occ >= 0).all()


def test_occupancy_features_match_rollout_average(rng):
    m = tiny_mdp()
    pol = SoftmaxPolicy((np.array([0.4, -0.2]), np.array([1.0, 0.5])))
    want = occupancy_features(m, pol)
    sums = [np.zeros(2), np.zeros(2)]
    n = 20000
    for i in range(n):
        for h, s, a, _, _ in rollout(m, pol, rng=rng):
            sums[h] += m.features[h][s, a]
    for h in range(2):
        np.testing.assert_allclose(sums[h] / n, want[h], atol=0.02)


def test_lift_weights_masks_unavailable_actions():
    m = random_tabular_mdp(np.random.default_rng(3))
    q = lift_weights(m, [np.ones(d) for d in m.dims])
    for qh, mask in zip(q, m.action_mask):
        assert (qh[~mask] == 0).all()


@given(st.integers(0, 10_000))
def test_values_bounded_by_horizon(seed):
    m = random_tabular_mdp(np.random.default_rng(seed), reward_scale=1.0)
    v = evaluate_policy_exact(m, TabularPolicy.uniform(m))
    for h, vh in enumerate(v.v):
        assert np.abs(vh).max() <= m.horizon - h + 1e-12
