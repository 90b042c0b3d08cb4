import itertools
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specauction.errors import DomainError, ModeError
from specauction.fixtures import greedy_example
from specauction.graph import ConflictGraph, exact_rho, gen_random_graph, is_independent
from specauction.greedy import (local_ratio_greedy, local_ratio_residuals, monotone_greedy,
                                set_value)
from specauction.instance import Instance
from specauction.mechanism import monotonicity_probe
from specauction.valuations import SymmetricValuation

seeds = st.integers(0, 2**31)

# user u here is the vertex at position u + 1 of the ordering
BIDS_LOW = [F(23, 2), F(7), F(7), F(7), F(6), F(6), F(3)]
BIDS_HIGH = BIDS_LOW[:6] + [F(4)]


def brute_mwis(g, bids):
    best = 0
    for r in range(g.n + 1):
        for sub in itertools.combinations(range(g.n), r):
            if is_independent(g, sub):
                best = max(best, sum(bids[v] for v in sub))
    return best


def scalar_instance(g, order, bids):
    return Instance(g, order, 1, [SymmetricValuation((0.0, float(b))) for b in bids])


def test_local_ratio_golden_low_bid():
    g, order, _ = greedy_example()
    res = local_ratio_residuals(g, order.order, BIDS_LOW)
    assert res == {0: F(-1, 2), 1: F(4), 2: F(4), 3: F(1), 4: F(3), 5: F(3), 6: F(3)}
    assert local_ratio_greedy(g, order.order, BIDS_LOW) == {1, 2, 3, 6}


def test_local_ratio_golden_high_bid():
    g, order, _ = greedy_example()
    res = local_ratio_residuals(g, order.order, BIDS_HIGH)
    assert res == {0: F(1, 2), 1: F(3), 2: F(3), 3: F(1), 4: F(4), 5: F(2), 6: F(4)}
    assert local_ratio_greedy(g, order.order, BIDS_HIGH) == {0, 4}


def test_fixture_agrees_with_literal_values():
    _, _, data = greedy_example()
    assert data["variants"]["x3"]["bids"] == BIDS_LOW
    assert data["variants"]["x4"]["bids"] == BIDS_HIGH


def test_monotone_greedy_golden():
    g, order, _ = greedy_example()
    trace = []
    chosen = monotone_greedy(g, order.order, BIDS_HIGH, trace=trace)
    assert chosen == {0, 4} and set_value(BIDS_HIGH, chosen) == F(35, 2)
    totals = [t[2] for t in trace]
    assert totals.index(max(totals)) == 4
    assert monotone_greedy(g, order.order, BIDS_LOW) == {0, 4}


def test_probe_witness_and_monotone_counterpart():
    g, order, _ = greedy_example()
    inst = scalar_instance(g, order, BIDS_LOW)
    grid = [F(3), F(4)]
    ok, wit = monotonicity_probe(local_ratio_greedy, inst, 6, grid, bids=BIDS_LOW)
    assert not ok and wit == (F(3), F(4))
    assert monotonicity_probe(monotone_greedy, inst, 6, grid, bids=BIDS_LOW) == (True, None)
    assert monotonicity_probe(lambda *_: {6}, inst, 6, [1, 2, 5]) == (True, None)
    with pytest.raises(DomainError):
        monotonicity_probe(monotone_greedy, inst, 6, [4, 3])


def test_edgeless_and_single_vertex():
    g = ConflictGraph(np.zeros((4, 4)), unweighted=True)
    bids = [1.0, 0.0, 2.0, -1.0]
    assert local_ratio_greedy(g, range(4), bids) == {0, 2}
    assert monotone_greedy(g, range(4), bids) == {0, 2}
    one = ConflictGraph(np.zeros((1, 1)), unweighted=True)
    assert monotone_greedy(one, (0,), [2.0]) == {0}
    assert monotone_greedy(one, (0,), [0.0]) == set()
    assert local_ratio_greedy(one, (0,), [0.0]) == set()


def test_weighted_graph_rejected():
    g = ConflictGraph.from_edges(2, [(0, 1, 0.5)])
    with pytest.raises(ModeError):
        local_ratio_greedy(g, (0, 1), [1, 1])
    with pytest.raises(ModeError):
        monotone_greedy(g, (0, 1), [1, 1])


@settings(max_examples=80, deadline=None)
@given(seeds, st.integers(1, 9))
def test_outputs_independent_and_ratio_bounds(seed, n):
    rng = np.random.default_rng(seed)
    g, order = gen_random_graph(n, float(rng.uniform(0.1, 0.9)), False, seed)
    bids = rng.uniform(0, 10, n).tolist()
    rho, _ = exact_rho(g)
    opt = brute_mwis(g, bids)
    lr = local_ratio_greedy(g, order.order, bids)
    mg = monotone_greedy(g, order.order, bids)
    assert is_independent(g, lr) and is_independent(g, mg)
    # order comes from exact_rho, so order.rho is the exact value
    assert order.rho == rho
    if rho > 0:
        assert set_value(bids, lr) >= opt / rho - 1e-9
        assert set_value(bids, mg) >= opt / (2 * rho * max(np.log2(n), 0) + rho) - 1e-9
    else:
        assert set_value(bids, mg) == pytest.approx(opt)


def test_monotone_greedy_is_monotone_fuzz():
    rng = np.random.default_rng(123)
    for trial in range(10000):
        n = int(rng.integers(1, 9))
        p = float(rng.uniform(0.1, 0.9))
        g = ConflictGraph.from_undirected(
            n, [e for e in itertools.combinations(range(n), 2) if rng.random() < p])
        order = rng.permutation(n).tolist()
        bids = rng.integers(0, 6, n).astype(float).tolist()
        v = int(rng.integers(n))
        before = v in monotone_greedy(g, order, bids)
        bids[v] += float(rng.integers(1, 4))
        if before:
            assert v in monotone_greedy(g, order, bids)
