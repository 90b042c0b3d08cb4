import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpus import feasible_channel_point, mrs_instance
from specauction.errors import DomainError, SimulationError
from specauction.graph import ConflictGraph, Ordering
from specauction.instance import Allocation, Instance
from specauction.lp import build_channel_polytope
from specauction.midr import (DeltaEstimator, MidrConfig, PerturbedObjective, RoundingPlan,
                              SimulationPlan, default_mu, dyadic_level, expected_welfare,
                              marginals_csv, maximize_expected_welfare, perturb_midr,
                              round_exact, simulate_midr)
from specauction.valuations import MrsValuation, Uniform

seeds = st.integers(0, 2**31)


def uniform_user(k, w):
    return MrsValuation(k, ((float(w), Uniform(1)),))


def lone(k=1, w=1.0):
    return Instance(ConflictGraph(np.zeros((1, 1)), unweighted=True), Ordering((0,), 0.0), k,
                    [uniform_user(k, w)])


def within_sigma(freq, target, runs, sigmas=4.0):
    sd = np.sqrt(target * (1 - target) / runs)
    return np.all(np.abs(freq - target) <= sigmas * sd + 1e-12)


def test_default_mu():
    assert default_mu(1, 3) == 2.0 ** -40
    assert default_mu(10, 5) == 2.0 ** -50
    assert default_mu(100, 20) == np.finfo(float).tiny
    with pytest.raises(DomainError):
        MidrConfig(alpha=0.5)
    with pytest.raises(DomainError):
        MidrConfig(alpha=1.0, mu=1.0)


def test_expected_welfare_examples():
    inst = lone(1, 1.0)
    assert expected_welfare(inst, np.zeros((1, 1)), 2.0) == 0
    alpha = 1.0
    assert expected_welfare(inst, [[alpha]], alpha) == pytest.approx(1 - math.exp(-0.5))


def test_expected_welfare_matches_rounding_simulation():
    rng = np.random.default_rng(1)
    inst = mrs_instance(rng, 2, 2, weighted=False, p=1.0)
    x = feasible_channel_point(inst, rng)
    alpha = 2.0
    plan = RoundingPlan(inst, x, alpha)
    runs = 100000
    masks = plan.sample_batch(7, runs)
    bits = (masks * (1 << np.arange(inst.k))).sum(axis=2)
    welfare = sum(inst.valuations[v].table[bits[:, v]] for v in range(inst.n))
    se = welfare.std() / math.sqrt(runs)
    assert abs(welfare.mean() - expected_welfare(inst, x, alpha)) <= 4 * se


def test_optimizer_zero_valuations():
    inst = Instance(ConflictGraph(np.zeros((2, 2)), unweighted=True), Ordering((0, 1), 0.0), 2,
                    [MrsValuation(2, ())] * 2)
    sol = maximize_expected_welfare(inst, alpha=1.0)
    assert sol.objective_value == 0 and sol.gap == 0


def test_optimizer_single_user_closed_form():
    alpha = 3.0
    sol = maximize_expected_welfare(lone(1, 1.0), alpha=alpha)
    assert sol.x[0, 0] == pytest.approx(1.0)
    # the perturbation weight mu * b([k]) / (n^2 k) equals mu here, so the terms add to q
    assert sol.objective_value == pytest.approx(1 - math.exp(-1 / (2 * alpha)), abs=1e-12)


def test_optimizer_matches_grid_on_binding_constraint():
    # triangle: the last vertex sees x0 + x1 <= 1 (symmetric weight 2, rho 2)
    g = ConflictGraph.from_undirected(3, [(0, 1), (1, 2), (0, 2)])
    inst = Instance(g, Ordering((0, 1, 2), 2.0), 1,
                    [uniform_user(1, 5), uniform_user(1, 3), uniform_user(1, 1)])
    alpha = 2.0
    cfg = MidrConfig(alpha=alpha, tol_gap=1e-9)
    sol = maximize_expected_welfare(inst, config=cfg)
    mu = sol.mu
    pert = mu * 9 / 9
    t = np.linspace(0, 1, 1_000_001)

    def q(x):
        return -np.expm1(-x / (2 * alpha))

    f = (1 - mu) * (5 * q(t) + 3 * q(1 - t) + q(1.0)) + pert * (q(t) + q(1 - t) + q(1.0))
    best = int(np.argmax(f))
    assert sol.x[0, 0] == pytest.approx(t[best], abs=2e-6)
    assert sol.x[0, 0] + sol.x[1, 0] == pytest.approx(1, abs=1e-9)
    assert sol.x[2, 0] == pytest.approx(1)
    assert sol.objective_value >= f[best] - 1e-9


@settings(max_examples=15, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 3))
def test_optimizer_dominates_sampled_points(seed, n, k):
    rng = np.random.default_rng(seed)
    inst = mrs_instance(rng, n, k)
    cfg = MidrConfig.for_instance(inst)
    sol = maximize_expected_welfare(inst, config=cfg)
    assert sol.gap <= cfg.tol_gap
    A, b = build_channel_polytope(inst.graph, inst.ordering.order, inst.rho, k)
    assert np.all(A @ sol.x.ravel() <= b + 1e-9)
    obj = PerturbedObjective(inst, cfg.alpha, sol.mu)
    for _ in range(30):
        z = feasible_channel_point(inst, rng)
        assert sol.objective_value >= obj.value(z) - cfg.tol_gap


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 3))
def test_objective_gradient_and_concavity(seed, n, k):
    rng = np.random.default_rng(seed)
    inst = mrs_instance(rng, n, k)
    obj = PerturbedObjective(inst, 2.0, 0.01)
    a, b = feasible_channel_point(inst, rng).ravel(), feasible_channel_point(inst, rng).ravel()
    h = 1e-6
    fd = np.array([(obj.value(a + h * e) - obj.value(a - h * e)) / (2 * h)
                   for e in np.eye(n * k)])
    assert np.allclose(obj.gradient(a), fd, rtol=1e-5, atol=1e-8)
    d = b - a
    for s in np.linspace(0.1, 0.9, 5):
        mid = a + s * d
        second = obj.value(mid + 1e-3 * d) - 2 * obj.value(mid) + obj.value(mid - 1e-3 * d)
        assert second <= 1e-8
        assert d @ obj.hessian(mid) @ d <= 1e-9
    assert obj.per_user(a).sum() == pytest.approx(obj.value(a))


def test_round_exact_examples():
    inst = lone(1, 1.0)
    assert round_exact(inst, np.zeros((1, 1)), 1.0, 0).counts() == [0]
    plan = RoundingPlan(inst, [[1.0]], 1.0)
    assert plan.retain[0, 0] == pytest.approx(1 - math.exp(-0.5))
    runs = 100000
    freq = plan.sample_batch(3, runs).mean(axis=0)
    assert within_sigma(freq, plan.targets(), runs)


def test_single_and_batch_sampling_agree():
    rng = np.random.default_rng(4)
    inst = mrs_instance(rng, 4, 3)
    x = feasible_channel_point(inst, rng)
    plan = RoundingPlan(inst, x, 2.0)
    for seed in range(10):
        batch = plan.sample_batch(seed, 1)[0]
        alloc = round_exact(inst, x, 2.0, seed, plan=plan)
        assert alloc == Allocation(tuple(frozenset(np.nonzero(r)[0].tolist()) for r in batch))


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(1, 7), st.integers(1, 4))
def test_rounding_outputs_feasible(seed, n, k):
    rng = np.random.default_rng(seed)
    inst = mrs_instance(rng, n, k)
    x = feasible_channel_point(inst, rng)
    alpha = MidrConfig.for_instance(inst).alpha
    plan = RoundingPlan(inst, x, alpha)
    sim = SimulationPlan(inst, alpha, lambda t: x)
    for s in range(10):
        assert plan.sample(s).is_feasible(inst.graph)
        a = sim.sample(s)
        assert a.is_feasible(inst.graph)
        assert perturb_midr(inst, a, s, 0.5).is_feasible(inst.graph)


def test_round_exact_marginal_law():
    rng = np.random.default_rng(5)
    runs = 100000
    for trial in range(3):
        inst = mrs_instance(rng, 4, 3)
        x = feasible_channel_point(inst, rng)
        plan = RoundingPlan(inst, x, MidrConfig.for_instance(inst).alpha)
        assert within_sigma(plan.sample_batch(trial, runs).mean(axis=0), plan.targets(), runs)


def test_dyadic_levels():
    assert dyadic_level([0.0, 0.4999]).tolist() == [1, 1]
    assert dyadic_level([0.5, 0.75, 0.875]).tolist() == [2, 3, 4]
    draws = np.random.default_rng(0).random(100000)
    r = dyadic_level(draws)
    for t in (1, 2, 3):
        p = 2.0 ** -t
        assert abs(np.mean(r == t) - p) <= 4 * math.sqrt(p * (1 - p) / len(draws))


def test_simulation_zero_and_closed_form():
    zero = Instance(ConflictGraph(np.zeros((2, 2)), unweighted=True), Ordering((0, 1), 0.0), 2,
                    [MrsValuation(2, ())] * 2)
    est = DeltaEstimator(zero, MidrConfig(alpha=1.0))
    assert not est(1).any()
    for s in range(20):
        assert simulate_midr(zero, 1.0, est, s).counts() == [0, 0]
    inst = lone(1, 1.0)
    alpha = 2.0
    est = DeltaEstimator(inst, MidrConfig(alpha=alpha))
    assert est.x_star[0, 0] == pytest.approx(1.0)
    plan = SimulationPlan(inst, alpha, est)
    runs = 100000
    freq = plan.sample_batch(11, runs).mean(axis=0)
    assert within_sigma(freq, np.array([[1 - math.exp(-1 / (2 * alpha))]]), runs)


def test_simulation_marginal_law_on_optimum():
    rng = np.random.default_rng(6)
    inst = mrs_instance(rng, 3, 2)
    cfg = MidrConfig.for_instance(inst)
    est = DeltaEstimator(inst, cfg)
    plan = SimulationPlan(inst, cfg.alpha, est)
    runs = 100000
    target = -np.expm1(-est.x_star / (2 * cfg.alpha))
    assert within_sigma(plan.sample_batch(1, runs).mean(axis=0), target, runs)


def test_simulation_envelope_and_retention():
    rng = np.random.default_rng(7)
    inst = mrs_instance(rng, 3, 2)
    cfg = MidrConfig.for_instance(inst)
    est = DeltaEstimator(inst, cfg, noise=0.9, seed=3)
    plan = SimulationPlan(inst, cfg.alpha, est)
    prev = plan.y(1)
    for t in range(2, 12):
        y = plan.y(t)
        assert np.all(y >= prev)
        assert np.all(y <= est.x_star + 2 ** -t)
        r = plan.retention(t)
        assert np.all((r >= 0) & (r <= 1))
        assert np.all(r[y == prev] == 0)
        assert np.all(plan.singleton_mass(t).sum(axis=0) <= 2.0 ** -t)
        prev = y
    assert est.diagnostics["strong_concavity"] > 0


def test_simulation_rejects_overfull_level():
    inst = Instance(ConflictGraph(np.zeros((4, 4)), unweighted=True), Ordering.identity(4), 1,
                    [uniform_user(1, 1)] * 4)
    plan = SimulationPlan(inst, 1.0, lambda t: np.zeros((4, 1)) if t == 1 else np.ones((4, 1)))
    with pytest.raises(SimulationError):
        plan.singleton_mass(2)


def test_perturbation_examples():
    rng = np.random.default_rng(0)
    inst = mrs_instance(rng, 3, 2)
    full = Allocation((frozenset({0, 1}),) * 3)
    assert perturb_midr(inst, full, 5, 0.0) is full
    empty = Allocation.empty(3)
    assert all(perturb_midr(inst, empty, s, 0.999).counts() == [0, 0, 0] for s in range(50))
    runs = 30000
    hits = np.zeros(3)
    for s in range(runs):
        out = perturb_midr(inst, full, s, 0.999999)
        for v, c in enumerate(out.counts()):
            hits[v] += c == 2
    assert within_sigma(hits / runs, np.full(3, 1 / 3), runs)


def test_marginals_csv():
    text = marginals_csv(np.array([[0.0, 1.0]]), 1.0, empirical=np.array([[0.0, 0.4]]), seed=3)
    lines = text.splitlines()
    assert lines[0] == "# seed=3" and lines[1] == "user,channel,x,target,empirical"
    assert lines[2] == "0,0,0.0,0.0,0.0"
    assert float(lines[3].split(",")[3]) == pytest.approx(1 - math.exp(-0.5))
