import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnl_lab.model import (OUTSIDE, ContextRound, InstanceConfig, Offer, ParamVector,
                           choice_probabilities, context_interval, expected_revenue,
                           generate_contexts, generate_instance, sample_choice, utility)
from mnl_lab.rng import substream


def one_item(u, price=1.0):
    # psi.x = u + price, phi.x = 1 gives utility u at the given price
    theta = ParamVector([u + price], [1.0])
    return Offer((0,), (price,)), theta, ContextRound(np.ones((1, 1)))


def test_utility_examples():
    assert utility(ParamVector.zeros(2), [0.3, 0.7], 3.0) == 0.0
    assert utility(ParamVector([1.0], [1.0]), [1.0], 1.0) == 0.0
    th = ParamVector([0.4, 0.0], [0.2, 0.0])
    assert utility(th, [1.0, 5.0], 1.5) == pytest.approx(0.1, abs=1e-15)


def test_choice_probability_examples():
    rnd = ContextRound(np.ones((2, 1)))
    q = choice_probabilities(Offer((0, 1), (1.0, 1.0)), ParamVector([1.0], [1.0]), rnd)
    np.testing.assert_allclose(q, [1 / 3] * 3, atol=1e-15)
    offer, th, rnd = one_item(0.0)
    np.testing.assert_allclose(choice_probabilities(offer, th, rnd), [0.5, 0.5])
    offer, th, rnd = one_item(1.0)
    q = choice_probabilities(offer, th, rnd)
    assert q[1] == pytest.approx(math.e / (1 + math.e), abs=1e-15)
    assert q[0] == pytest.approx(1 / (1 + math.e), abs=1e-15)


def test_expected_revenue_examples():
    th = ParamVector([0.3], [0.4])
    rnd = ContextRound(np.ones((3, 1)))
    assert expected_revenue(Offer(), th, rnd) == 0.0
    offer, th, rnd = one_item(0.0)
    assert expected_revenue(offer, th, rnd) == pytest.approx(0.5)
    # u = 1 - p at p = 1 + W(1): revenue W(1)
    p = 1.5671432904097838
    offer, th, rnd = one_item(1.0 - p, p)
    assert expected_revenue(offer, th, rnd) == pytest.approx(p - 1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_probabilities_match_naive_formula(us):
    n = len(us)
    rnd = ContextRound(np.eye(n))
    th = ParamVector(us, np.zeros(n))
    offer = Offer(tuple(range(n)), (0.0,) * n)
    q = choice_probabilities(offer, th, rnd)
    e = np.exp(us)
    naive = np.concatenate([[1.0], e]) / (1.0 + e.sum())
    assert abs(q.sum() - 1) <= 1e-12
    assert np.all(q > 0)
    np.testing.assert_allclose(q, naive, rtol=1e-10, atol=0)


def test_large_utilities_do_not_overflow():
    offer, th, rnd = one_item(800.0)
    q = choice_probabilities(offer, th, rnd)
    assert np.all(np.isfinite(q)) and q[1] == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_revenue_invariant_under_item_order(n, seed):
    r = np.random.default_rng(seed)
    rnd = ContextRound(r.uniform(0, 1, (n, 3)))
    th = ParamVector(r.normal(size=3), r.uniform(0.1, 1, 3))
    items = r.permutation(n)
    prices = r.uniform(0, 5, n)
    a = expected_revenue(Offer(tuple(items), tuple(prices)), th, rnd)
    perm = r.permutation(n)
    b = expected_revenue(Offer(tuple(items[perm]), tuple(prices[perm])), th, rnd)
    assert a == pytest.approx(b, rel=1e-13)


def test_offer_validation():
    with pytest.raises(ValueError):
        Offer((1, 1), (1.0, 2.0))
    with pytest.raises(ValueError):
        Offer((0,), (-1.0,))
    with pytest.raises(ValueError):
        Offer((0, 1), (1.0,))
    with pytest.raises(ValueError):
        Offer((0, 1, 2), (1.0, 1.0, 1.0)).validate(ContextRound(np.ones((3, 1))), k_cap=2)


def test_sample_choice_degenerate_and_deterministic():
    # first item has overwhelming utility
    rnd = ContextRound(np.array([[1.0], [1.0]]))
    th = ParamVector([60.0], [0.0])
    offer = Offer((1,), (1.0,))
    rng = np.random.default_rng(0)
    assert all(sample_choice(offer, th, rnd, rng) == 1 for _ in range(200))
    th = ParamVector([0.2], [0.1])
    offer = Offer((0, 1), (1.0, 2.0))
    a = [sample_choice(offer, th, rnd, substream(7, "choices")) for _ in range(1)]
    r1, r2 = substream(7, "choices"), substream(7, "choices")
    seq1 = [sample_choice(offer, th, rnd, r1) for _ in range(500)]
    seq2 = [sample_choice(offer, th, rnd, r2) for _ in range(500)]
    assert seq1 == seq2 and a[0] == seq1[0]


def test_sample_choice_frequencies_within_3_sigma():
    rnd = ContextRound(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    th = ParamVector([0.5, -0.2], [0.3, 0.1])
    offer = Offer((0, 1, 2), (1.0, 0.5, 2.0))
    q = choice_probabilities(offer, th, rnd)
    rng = substream(3, "choices")
    n = 100_000
    draws = np.array([sample_choice(offer, th, rnd, rng) for _ in range(n)])
    labels = [OUTSIDE, 0, 1, 2]
    for qi, lab in zip(q, labels):
        freq = np.mean(draws == lab)
        assert abs(freq - qi) <= 3 * math.sqrt(qi * (1 - qi) / n)


def test_generate_instance_degenerate_d1():
    inst = generate_instance(InstanceConfig(3, 1, 1, 0.5, 10), 5)
    assert inst.phi_star[0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 8), st.floats(0.01, 0.5))
def test_instance_invariants(seed, d, l0):
    inst = generate_instance(InstanceConfig(4, 2, d, l0, 10), seed)
    assert abs(np.linalg.norm(inst.psi_star) - 0.5) <= 1e-12
    assert np.linalg.norm(inst.theta.theta) <= 1.0 + 1e-12
    rnd = generate_contexts(inst, 1, substream(seed, "contexts"))
    assert np.all(np.linalg.norm(rnd.contexts, axis=1) <= 1.0)
    assert np.all(rnd.contexts @ inst.phi_star >= l0 * (1 - 1e-12))


def test_invalid_l0_rejected():
    with pytest.raises(ValueError):
        InstanceConfig(4, 2, 3, 0.6, 10)
    with pytest.raises(ValueError):
        InstanceConfig(2, 3, 3, 0.1, 10)


def test_price_sensitivity_bound_sampled_and_from_endpoints():
    cfg = InstanceConfig(10, 2, 5, 0.25, 10)
    lo, hi = context_interval(5, 0.25)
    # smallest possible inner product: all coordinates at the lower endpoint
    assert 5 * lo * lo >= 0.25 * (1 - 1e-12)
    worst = np.inf
    for seed in range(100):
        inst = generate_instance(cfg, seed)
        rng = substream(seed, "contexts")
        X = np.concatenate([generate_contexts(inst, t, rng).contexts for t in range(1, 1001)])
        worst = min(worst, float((X @ inst.phi_star).min()))
    assert worst >= 0.25 * (1 - 1e-12)


def test_degenerate_context_interval_d2():
    inst = generate_instance(InstanceConfig(3, 1, 2, 0.5, 10), 1)
    rnd = generate_contexts(inst, 1, substream(1, "contexts"))
    np.testing.assert_allclose(rnd.contexts, 0.5, rtol=0, atol=1e-15)


def test_context_norms_and_mean():
    inst = generate_instance(InstanceConfig(10, 2, 4, 0.1, 10), 2)
    rng = substream(2, "contexts")
    X = np.concatenate([generate_contexts(inst, t, rng).contexts for t in range(1, 1001)])
    assert np.all(np.linalg.norm(X, axis=1) <= 1.0)
    lo, hi = context_interval(4, 0.1)
    sd = (hi - lo) / math.sqrt(12) / math.sqrt(X.size)
    assert abs(X.mean() - 0.5 * (lo + hi)) <= 3 * sd


def test_substreams_are_independent_of_each_other():
    a = substream(11, "contexts").random(5)
    b = substream(11, "choices").random(5)
    c = substream(11, "contexts").random(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)
    with pytest.raises(ValueError):
        substream(-1, "contexts")
