import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specauction.errors import DomainError, SizeError
from specauction.mechanism import random_mrs
from specauction.valuations import (Coverage, MrsValuation, Partition, SymmetricValuation,
                                    Uniform, batch_lottery_gradients, batch_lottery_values,
                                    count_distribution, is_submodular_table,
                                    lottery_gradient, lottery_hessian, lottery_value,
                                    poisson_lottery_value, rank_from_dict, valuation_from_dict,
                                    value)

seeds = st.integers(0, 2**31)


def enumerate_lottery(val, q):
    """Sum over all subsets, written independently of the bitmask tables."""
    k = len(q)
    total = 0.0
    for r in range(k + 1):
        for t in itertools.combinations(range(k), r):
            p = np.prod([q[j] if j in t else 1 - q[j] for j in range(k)])
            total += p * value(val, t)
    return total


def random_coverage_valuation(k, rng):
    m = int(rng.integers(1, 5))
    cov = Coverage(tuple(rng.uniform(0, 3, m).tolist()),
                   tuple(tuple(e for e in range(m) if rng.random() < 0.5) for _ in range(k)))
    return MrsValuation(k, ((1.0, cov),))


def test_value_examples():
    sym = SymmetricValuation((0, 1, 3, 4))
    assert value(sym, []) == 0 and value(sym, [0, 2]) == 3
    u1 = MrsValuation(2, ((5.0, Uniform(1)),))
    assert value(u1, []) == 0 and value(u1, [0, 1]) == 5
    cov = MrsValuation(2, ((1.0, Coverage((1, 1, 1), ((0, 1), (1, 2)))),))
    assert value(cov, [0, 1]) == 3
    with pytest.raises(DomainError):
        value(u1, [2])


def test_symmetric_validation():
    with pytest.raises(DomainError):
        SymmetricValuation((1, 2))
    with pytest.raises(DomainError):
        SymmetricValuation((0, 2, 1))
    with pytest.raises(DomainError):
        Partition(((0, 1), (1,)), (1, 1))


def test_lottery_examples():
    u1 = MrsValuation(2, ((1.0, Uniform(1)),))
    assert lottery_value(u1, [0, 0]) == 0
    assert lottery_value(u1, [1, 1]) == 1
    assert lottery_value(u1, [0.5, 0.5]) == pytest.approx(0.75)
    with pytest.raises(SizeError):
        lottery_value(MrsValuation(21, ((1.0, Uniform(1)),)), np.zeros(21))
    with pytest.raises(DomainError):
        lottery_value(u1, [1.5, 0])


def test_gradient_examples():
    one = MrsValuation(1, ((1.0, Uniform(1)),))
    for q in (0.0, 0.3, 1.0):
        assert lottery_gradient(one, [q]) == pytest.approx([1.0])
    full = MrsValuation(3, ((1.0, Uniform(3)),))
    assert lottery_gradient(full, np.ones(3)) == pytest.approx(np.ones(3))


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 6), st.booleans())
def test_lottery_matches_enumeration(seed, k, coverage):
    rng = np.random.default_rng(seed)
    val = random_coverage_valuation(k, rng) if coverage else random_mrs(k, rng)
    q = rng.random(k)
    assert lottery_value(val, q) == pytest.approx(enumerate_lottery(val, q), rel=1e-12, abs=1e-12)
    corner = (rng.random(k) < 0.5).astype(float)
    assert lottery_value(val, corner) == value(val, np.nonzero(corner)[0])


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6))
def test_gradient_and_hessian_match_finite_differences(seed, k):
    rng = np.random.default_rng(seed)
    val = random_mrs(k, rng)
    q = rng.uniform(0.1, 0.9, k)
    h = 1e-5
    fd = np.array([(lottery_value(val, q + h * e) - lottery_value(val, q - h * e)) / (2 * h)
                   for e in np.eye(k)])
    assert np.allclose(lottery_gradient(val, q), fd, rtol=1e-5, atol=1e-8)
    fdh = np.array([(lottery_gradient(val, q + h * e) - lottery_gradient(val, q - h * e)) / (2 * h)
                    for e in np.eye(k)])
    assert np.allclose(lottery_hessian(val, q), fdh, rtol=1e-5, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 6))
def test_concave_in_allocation_space(seed, k):
    rng = np.random.default_rng(seed)
    val = random_mrs(k, rng)
    scale = float(rng.uniform(0.5, 4))
    a, b = rng.random(k), rng.random(k)
    for t in np.linspace(0.05, 0.95, 7):
        h = 1e-3
        mid = a + t * (b - a)
        second = (poisson_lottery_value(val, mid + h * (b - a), scale)
                  - 2 * poisson_lottery_value(val, mid, scale)
                  + poisson_lottery_value(val, mid - h * (b - a), scale))
        assert second <= 1e-8


def test_lottery_not_concave_in_probability_space():
    # the multilinear extension is convex along (1, -1): second derivative +2
    val = MrsValuation(2, ((1.0, Uniform(1)),))
    q, d, h = np.array([0.5, 0.5]), np.array([1.0, -1.0]), 0.1
    second = (lottery_value(val, q + h * d) - 2 * lottery_value(val, q)
              + lottery_value(val, q - h * d))
    assert second == pytest.approx(2 * h * h)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6), st.booleans())
def test_descriptors_are_monotone_submodular(seed, k, coverage):
    rng = np.random.default_rng(seed)
    val = random_coverage_valuation(k, rng) if coverage else random_mrs(k, rng)
    assert is_submodular_table(val.table, k)
    for t in range(1 << k):
        for j in range(k):
            assert val.table[t | 1 << j] >= val.table[t] - 1e-12


def test_non_submodular_table_detected():
    table = np.array([0.0, 0.0, 0.0, 1.0])
    assert not is_submodular_table(table, 2)


def test_lottery_matches_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(5):
        k = int(rng.integers(2, 6))
        val = random_mrs(k, rng)
        q = rng.random(k)
        draws = rng.random((10**6, k)) < q
        masks = draws @ (1 << np.arange(k))
        vals = val.table[masks]
        se = vals.std() / np.sqrt(len(vals))
        assert abs(vals.mean() - lottery_value(val, q)) <= 4 * se + 1e-12


def test_count_distribution_is_poisson_binomial():
    q = np.array([0.2, 0.5, 0.9])
    brute = np.zeros(4)
    for bits in itertools.product([0, 1], repeat=3):
        brute[sum(bits)] += np.prod([qj if b else 1 - qj for qj, b in zip(q, bits)])
    assert np.allclose(count_distribution(q), brute)


def test_coverage_reduction_matches_direct_union():
    rng = np.random.default_rng(5)
    for _ in range(20):
        k = int(rng.integers(1, 5))
        val = random_coverage_valuation(k, rng)
        cov = val.terms[0][1]
        for r in range(k + 1):
            for t in itertools.combinations(range(k), r):
                covered = set().union(*(cov.covers[j] for j in t)) if t else set()
                assert value(val, t) == pytest.approx(sum(cov.weights[e] for e in covered))


def test_valuation_json_round_trip():
    rng = np.random.default_rng(3)
    val = random_mrs(4, rng)
    assert valuation_from_dict(val.to_dict(), 4) == val
    sym = SymmetricValuation((0, 1, 2))
    assert valuation_from_dict(sym.to_dict(), 2) == sym
    cov = Coverage((1.0, 2.0), ((0,), (0, 1)))
    assert rank_from_dict(cov.to_dict()) == cov


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 5), st.integers(1, 5))
def test_batched_lottery_matches_per_bidder(seed, n, k):
    rng = np.random.default_rng(seed)
    vals = [random_mrs(k, rng) for _ in range(n)]
    Q = rng.random((n, k))
    tables = np.stack([v.table for v in vals])
    got_v = batch_lottery_values(tables, Q)
    got_g = batch_lottery_gradients(tables, Q)
    for i, val in enumerate(vals):
        assert got_v[i] == pytest.approx(lottery_value(val, Q[i]), abs=1e-12)
        assert got_g[i] == pytest.approx(lottery_gradient(val, Q[i]), abs=1e-12)
