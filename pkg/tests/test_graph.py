import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specauction.errors import DomainError, ModeError, SizeError
from specauction.fixtures import greedy_example
from specauction.graph import (ConflictGraph, Ordering, earlier_neighbors, exact_rho,
                               gen_physical_model, gen_protocol_model, gen_random_graph,
                               graph_from_dict, graph_to_dict, is_independent,
                               rho_of_ordering, sinr_feasible, symmetric_weight)

PATH = ConflictGraph.from_undirected(3, [(0, 1), (1, 2)])


def brute_rho_of_ordering(g, order):
    """Enumerate every earlier subset; independent of the branch and bound."""
    wb = g.wbar
    best = 0.0
    for p, v in enumerate(order):
        earlier = order[:p]
        for r in range(1, len(earlier) + 1):
            for sub in itertools.combinations(earlier, r):
                if is_independent(g, sub):
                    best = max(best, float(sum(wb[u, v] for u in sub)))
    return best


def random_weighted(rng, n):
    w = np.where(rng.random((n, n)) < 0.6, rng.random((n, n)) * 0.8, 0.0)
    np.fill_diagonal(w, 0.0)
    return ConflictGraph(w)


def test_symmetric_weight_examples():
    g = ConflictGraph.from_edges(2, [(0, 1, 0.3), (1, 0, 0.5)])
    assert symmetric_weight(g, 0, 1) == pytest.approx(0.8)
    assert symmetric_weight(ConflictGraph(np.zeros((2, 2))), 0, 1) == 0
    assert symmetric_weight(ConflictGraph.from_undirected(2, [(0, 1)]), 1, 0) == 2
    with pytest.raises(DomainError):
        symmetric_weight(g, 1, 1)


def test_is_independent_examples():
    g, _, _ = greedy_example()
    assert is_independent(g, [])
    assert all(is_independent(g, [v]) for v in range(g.n))
    assert is_independent(g, [0, 4])
    assert not is_independent(g, [0, 1])


def test_independence_is_strict():
    g = ConflictGraph.from_edges(3, [(0, 2, 0.5), (1, 2, 0.5)])
    assert not is_independent(g, [0, 1, 2])
    assert is_independent(g, [0, 2])


def test_graph_validation():
    with pytest.raises(DomainError):
        ConflictGraph(np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(DomainError):
        ConflictGraph(np.array([[0.0, -1], [0, 0]]))
    with pytest.raises(DomainError):
        ConflictGraph(np.array([[0.0, 1], [0, 0]]), unweighted=True)
    with pytest.raises(DomainError):
        Ordering((0, 0), 1.0)


def test_rho_of_ordering_examples():
    assert rho_of_ordering(ConflictGraph(np.zeros((4, 4))), (2, 0, 3, 1)) == 0
    assert rho_of_ordering(PATH, (1, 0, 2)) == 2
    assert rho_of_ordering(PATH, (0, 2, 1)) == 4
    g, order, _ = greedy_example()
    assert rho_of_ordering(g, order.order) == 6


def test_rho_of_ordering_size_guard():
    g = ConflictGraph(np.zeros((21, 21)))
    with pytest.raises(SizeError):
        rho_of_ordering(g, range(21))
    assert rho_of_ordering(g, range(21), bound_only=True) == 0


def test_exact_rho_examples():
    rho, order = exact_rho(ConflictGraph(np.zeros((3, 3))))
    assert rho == 0 and sorted(order) == [0, 1, 2]
    rho, order = exact_rho(PATH)
    assert rho == 2 and rho_of_ordering(PATH, order) == 2
    lone = ConflictGraph.from_edges(2, [(0, 1, 0.4)])
    rho, _ = exact_rho(lone)
    assert rho == symmetric_weight(lone, 0, 1) == pytest.approx(0.4)
    with pytest.raises(SizeError):
        exact_rho(ConflictGraph(np.zeros((10, 10))))


def test_greedy_example_exact_rho_frozen():
    # frozen from a brute-force minimum over all 5040 orderings
    g, _, _ = greedy_example()
    assert exact_rho(g)[0] == 4


def test_earlier_neighbors():
    g, order, _ = greedy_example()
    assert earlier_neighbors(g, order.order, 6) == {0, 5}
    assert earlier_neighbors(g, order.order, 0) == set()
    with pytest.raises(ModeError):
        earlier_neighbors(ConflictGraph.from_edges(2, [(0, 1, 0.4)]), (0, 1), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 7), st.booleans())
def test_rho_of_ordering_matches_enumeration(seed, n, weighted):
    rng = np.random.default_rng(seed)
    if weighted:
        g = random_weighted(rng, n)
    else:
        g, _ = gen_random_graph(n, 0.5, False, seed)
    order = tuple(rng.permutation(n).tolist())
    assert rho_of_ordering(g, order) == pytest.approx(brute_rho_of_ordering(g, order))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.booleans())
def test_exact_rho_is_minimum_over_orderings(seed, n, weighted):
    rng = np.random.default_rng(seed)
    g = random_weighted(rng, n) if weighted else gen_random_graph(n, 0.5, False, seed)[0]
    rho, order = exact_rho(g)
    values = [rho_of_ordering(g, p) for p in itertools.permutations(range(n))]
    assert rho == pytest.approx(min(values))
    assert rho_of_ordering(g, order) == pytest.approx(rho)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_independence_properties(seed, n):
    rng = np.random.default_rng(seed)
    g = random_weighted(rng, n)
    members = [v for v in range(n) if rng.random() < 0.6]
    if is_independent(g, members):
        for r in range(len(members)):
            for sub in itertools.combinations(members, r):
                assert is_independent(g, sub)
    gu, _ = gen_random_graph(n, 0.4, False, seed)
    classical = not any(gu.w[u, v] for u, v in itertools.combinations(members, 2))
    assert is_independent(gu, members) == classical


def test_protocol_model_examples():
    g, order = gen_protocol_model([(0.0, 0.0)], 1.0)
    assert g.n == 1 and order.rho == 0 and not g.w.any()
    g, _ = gen_protocol_model([(0.0, 0.0), (3.0, 0.0)], 1.0)
    assert not g.w.any()
    g, _ = gen_protocol_model([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1.0)
    assert g.unweighted and g.edges() == [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)]
    with pytest.raises(DomainError):
        gen_protocol_model([(0.0, 0.0), (0.0, 0.0)], 1.0)


def test_protocol_ordering_by_degree():
    g, order = gen_protocol_model([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1.0)
    assert order.order == (0, 2, 1)
    assert order.rho == rho_of_ordering(g, order.order)


def test_physical_model_examples():
    one = [((0.0, 0.0), (1.0, 0.0))]
    g, _ = gen_physical_model(one, 3.0, 1.0, 0.0)
    assert g.n == 1 and is_independent(g, [0])
    far = [((0.0, 0.0), (1.0, 0.0)), ((1e4, 0.0), (1e4 + 1.0, 0.0))]
    g, _ = gen_physical_model(far, 3.0, 1.0, 0.0)
    assert g.w.max() < 1e-9 and is_independent(g, [0, 1])
    same = [((0.0, 0.0), (1.0, 0.0))] * 2
    g, _ = gen_physical_model(same, 3.0, 1.0, 0.0)
    assert g.w[0, 1] >= 1 and g.w[1, 0] >= 1 and not is_independent(g, [0, 1])
    with pytest.raises(DomainError):
        gen_physical_model([((0.0, 0.0), (0.0, 0.0))], 3.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        gen_physical_model(one, 2.0, 1.0, 0.0)


def test_physical_ordering_by_length():
    links = [((0.0, 0.0), (3.0, 0.0)), ((50.0, 0.0), (51.0, 0.0)), ((100.0, 0.0), (102.0, 0.0))]
    _, order = gen_physical_model(links, 3.0, 1.0, 0.0)
    assert order.order == (1, 2, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_physical_independence_matches_sinr(seed, n):
    rng = np.random.default_rng(seed)
    links = []
    for _ in range(n):
        s = rng.uniform(0, 10, 2)
        r = s + rng.uniform(0.5, 2.0) * np.array([1.0, 0.0])
        links.append((tuple(s.tolist()), tuple(r.tolist())))
    beta, noise = 1.0, 1e-3
    g, _ = gen_physical_model(links, 3.0, beta, noise)
    for r in range(1, n + 1):
        for sub in itertools.combinations(range(n), r):
            assert is_independent(g, sub) == sinr_feasible(links, sub, 3.0, beta, noise)


def test_graph_json_round_trip():
    g, order = gen_random_graph(6, 0.5, True, 7)
    g2, order2 = graph_from_dict(graph_to_dict(g, order))
    assert np.array_equal(g.w, g2.w) and order2.order == order.order
    assert order2.rho == order.rho
