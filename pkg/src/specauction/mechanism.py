"""Truthful-in-expectation mechanisms, payments, and probes.

``lavi_swamy_mechanism`` pays scaled fractional VCG prices on the count LP and
samples a decomposition of the scaled LP optimum.  ``midr_mechanism`` charges
VCG prices over the distributional range of the MIDR pipeline; both payment
terms are evaluated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from specauction.decomposition import decompose_count_solution, default_count_alpha
from specauction.errors import DecompositionError, DomainError, SizeError
from specauction.instance import Allocation
from specauction.search import best_allocation
from specauction.lp import build_symmetric_lp, solve_packing_lp
from specauction.midr import (DeltaEstimator, MidrConfig, PerturbedObjective, RoundingPlan,
                              SimulationPlan, maximize_expected_welfare, perturb_midr)
from specauction.rng import PHASE_MECHANISM, PHASE_PICK, as_seed, keyed
from specauction.valuations import (MrsValuation, Partition, SymmetricValuation, Uniform,
                                    value)

BRUTE_FORCE_MAX_N = 12
BRUTE_FORCE_MAX_K = 3


@dataclass(frozen=True, eq=False)
class MechanismOutcome:
    allocation: Allocation
    payments: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- brute force

def brute_force_optimum(instance):
    """Exact welfare maximizer for n <= 12 and k <= 3; returns (allocation, welfare)."""
    if instance.n > BRUTE_FORCE_MAX_N or instance.k > BRUTE_FORCE_MAX_K:
        raise SizeError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, "
                        f"k <= {BRUTE_FORCE_MAX_K}")
    vals = instance.valuations
    alloc = best_allocation(instance.graph, instance.k, lambda v, s: value(vals[v], s))
    return alloc, alloc.welfare(instance)


# ---------------------------------------------------------------- fractional VCG

def _count_values(instance):
    return np.array([[val.values[i] for i in range(1, instance.k + 1)]
                     for val in instance.valuations])


def fractional_vcg(instance):
    """LP optimum and fractional Clarke payments.

    Returns ``(solution, payments)`` where payment v is the LP optimum with v's
    objective removed minus the others' LP value at the full optimum.
    """
    instance.require("symmetric")
    lp = build_symmetric_lp(instance)
    sol = solve_packing_lp(lp)
    vals = _count_values(instance)
    pay = np.zeros(instance.n)
    for v in range(instance.n):
        pay[v] = _without_optimum(instance, v) - _others_value(vals, sol.x, v)
    return sol, np.maximum(pay, 0.0)


def _without_optimum(instance, v):
    lp = build_symmetric_lp(instance)
    c = lp.c.reshape(lp.shape).copy()
    c[v] = 0.0
    sub = type(lp)(c.ravel(), lp.A, lp.b, lp.upper, lp.shape, lp.row_names, lp.var_names)
    return solve_packing_lp(sub).objective_value


def _others_value(vals, x, v):
    mask = np.ones(len(vals), dtype=bool)
    mask[v] = False
    return float((vals[mask] * x[mask]).sum())


def lavi_swamy_decomposition(instance, x, alpha=None, oracle=None):
    """Decomposition of the count-LP point ``x`` at the bid-independent ``alpha``."""
    alpha = (default_count_alpha(instance.graph, instance.rho, instance.n, instance.k)
             if alpha is None else float(alpha))
    dec = decompose_count_solution(instance, x, alpha_start=alpha, oracle=oracle)
    if dec.alpha_achieved > alpha * (1 + 1e-12):
        raise DecompositionError(f"decomposition needs alpha {dec.alpha_achieved:g} > {alpha:g}")
    return dec


def lavi_swamy_allocation(dec, rng) -> Allocation:
    """The allocation rule alone: one entry of the decomposition, drawn by weight."""
    return dec.pick(keyed(as_seed(rng), PHASE_MECHANISM, PHASE_PICK).random())


def prepare_lavi_swamy(instance, alpha=None, oracle=None):
    """LP optimum, fractional prices and the decomposition at the fixed ``alpha``.

    The decomposition is deterministic (oracle seed 0); only the sampling of
    an entry is random, so the result can be reused across runs.
    """
    instance.require("symmetric")
    sol, price = fractional_vcg(instance)
    return sol, price, lavi_swamy_decomposition(instance, sol.x, alpha, oracle)


def lavi_swamy_mechanism(instance, rng, alpha=None, oracle=None, prepared=None) -> MechanismOutcome:
    """Scaled fractional VCG with a decomposition of the scaled LP optimum.

    The scaling ``alpha`` must not depend on bids, so the decomposition is
    asked to succeed at exactly that value.  An allocated bidder pays its
    fractional price divided by its LP allocation mass, so the expected
    payment is price / alpha.
    """
    sol, price, dec = prepared or prepare_lavi_swamy(instance, alpha, oracle)
    seed = as_seed(rng)
    alloc = lavi_swamy_allocation(dec, seed)
    mass = sol.x.sum(axis=1)
    pay = np.zeros(instance.n)
    for v, s in enumerate(alloc.sets):
        if s and mass[v] > 0:
            pay[v] = price[v] / mass[v]
    return MechanismOutcome(alloc, pay, {
        "welfare": alloc.welfare(instance), "lp_optimum": sol.objective_value,
        "alpha": dec.alpha_achieved, "seed": seed, "fractional_prices": price.tolist(),
        "normalization": "price / allocation mass when allocated",
        "support": len(dec.entries),
    })


def _lavi_swamy_expected_utility(truth, report, v, alpha, oracle=None):
    """Closed-form expected utility of v (true values) when reporting ``report``."""
    sol, price, dec = prepare_lavi_swamy(report, alpha, oracle)
    marg = dec.count_marginals(truth.n, truth.k)
    gain = float(marg[v] @ _count_values(truth)[v])
    mass = float(sol.x[v].sum())
    pay = price[v] * float(marg[v].sum()) / mass if mass > 0 else 0.0
    return gain - pay


# ---------------------------------------------------------------- MIDR

def midr_prices(instance, config, solution=None):
    """VCG prices over the range: best welfare of the others minus theirs at the optimum."""
    sol = solution or maximize_expected_welfare(instance, config=config)
    pay = np.zeros(instance.n)
    gaps = [sol.gap]
    for v in range(instance.n):
        inc = np.ones(instance.n, dtype=bool)
        inc[v] = False
        best = maximize_expected_welfare(instance, config=config, include=inc)
        obj = PerturbedObjective(instance, config.alpha, sol.mu, inc)
        pay[v] = best.objective_value - obj.value(sol.x)
        gaps.append(best.gap)
    return sol, np.maximum(pay, 0.0), max(gaps)


class PreparedMidr:
    """Optimum, prices and sampling plans of the MIDR mechanism for one instance."""

    def __init__(self, instance, config=None):
        instance.require("mrs")
        self.config = config or MidrConfig.for_instance(instance)
        self.solution, self.prices, self.gap = midr_prices(instance, self.config)
        est = DeltaEstimator(instance, self.config, solution=self.solution)
        self.exact_plan = RoundingPlan(instance, self.solution.x, self.config.alpha,
                                       self.config.oracle)
        self.sim_plan = SimulationPlan(instance, self.config.alpha, est, self.config.oracle)


def midr_mechanism(instance, config=None, rng=None, fast=False, prepared=None) -> MechanismOutcome:
    """Optimize, round (dyadic simulation, or exact rounding when ``fast``), perturb."""
    prep = prepared or PreparedMidr(instance, config)
    seed = as_seed(rng)
    plan = prep.exact_plan if fast else prep.sim_plan
    alloc = perturb_midr(instance, plan.sample(seed), seed, prep.solution.mu)
    return MechanismOutcome(alloc, prep.prices.copy(), {
        "welfare": alloc.welfare(instance), "convex_optimum": prep.solution.objective_value,
        "alpha": prep.config.alpha, "mu": prep.solution.mu, "gap": prep.gap, "seed": seed,
    })


def _midr_expected_utility(truth, report, v, config, others_best):
    sol = maximize_expected_welfare(report, config=config)
    inc = np.ones(truth.n, dtype=bool)
    inc[v] = False
    others = PerturbedObjective(report, config.alpha, sol.mu, inc).value(sol.x)
    own = PerturbedObjective(truth, config.alpha, sol.mu).per_user(sol.x)[v]
    return own - max(others_best - others, 0.0), sol.gap


# ---------------------------------------------------------------- probes

@dataclass(frozen=True, eq=False)
class ProbeReport:
    bidder: int
    deltas: list
    mode: str
    seed: int
    min_delta: float
    tolerance: float = 0.0
    truthful_utility: float = 0.0

    @property
    def passed(self):
        return self.min_delta >= -self.tolerance


def truthfulness_probe(mechanism, instance, v, misreports, mode="exact", trials=200,
                       seed=0, config=None, alpha=None) -> ProbeReport:
    """Expected utility of truthful bidding minus that of each misreport.

    ``mode="exact"`` evaluates expectations in closed form; ``"sampled"``
    averages realized utilities over ``trials`` runs with common random seeds.
    """
    if mode not in ("exact", "sampled"):
        raise DomainError(f"unknown probe mode {mode!r}")
    if mechanism is midr_mechanism:
        config = config or MidrConfig.for_instance(instance)
        tol = 2 * config.tol_gap + 1e-9
    else:
        alpha = (default_count_alpha(instance.graph, instance.rho, instance.n, instance.k)
                 if alpha is None else alpha)
        tol = 1e-9
    reports = [instance.replace_valuation(v, m) for m in misreports]
    if mode == "exact":
        if mechanism is midr_mechanism:
            inc = np.ones(instance.n, dtype=bool)
            inc[v] = False
            others_best = maximize_expected_welfare(instance, config=config,
                                                    include=inc).objective_value
            truth_u, _ = _midr_expected_utility(instance, instance, v, config, others_best)
            utils = [_midr_expected_utility(instance, r, v, config, others_best)[0]
                     for r in reports]
        elif mechanism is lavi_swamy_mechanism:
            truth_u = _lavi_swamy_expected_utility(instance, instance, v, alpha)
            utils = [_lavi_swamy_expected_utility(instance, r, v, alpha) for r in reports]
        else:
            raise DomainError("exact mode supports the two library mechanisms")
    else:
        def mean_utility(rep):
            if mechanism is midr_mechanism:
                prep = PreparedMidr(rep, config)
                run = lambda s: mechanism(rep, config, s, prepared=prep)  # noqa: E731
            elif mechanism is lavi_swamy_mechanism:
                prep = prepare_lavi_swamy(rep, alpha)
                run = lambda s: mechanism(rep, s, prepared=prep)  # noqa: E731
            else:
                run = lambda s: mechanism(rep, s)  # noqa: E731
            total = 0.0
            for t in range(trials):
                out = run(int(keyed(seed, t).integers(0, 2**63 - 1)))
                total += value(instance.valuations[v], out.allocation.sets[v]) - out.payments[v]
            return total / trials
        truth_u = mean_utility(instance)
        utils = [mean_utility(r) for r in reports]
    deltas = [float(truth_u - u) for u in utils]
    return ProbeReport(v, deltas, mode, seed, min(deltas) if deltas else 0.0, tol,
                       float(truth_u))


def monotonicity_probe(algorithm, instance, v, grid, bids=None):
    """Check that v's win indicator never drops as its bid climbs the grid.

    ``instance`` is single-channel with symmetric valuations (bid = value of
    one channel); ``bids`` overrides them, e.g. with exact fractions.
    ``algorithm(graph, order, bids)`` returns the winner set.  Returns
    ``(monotone, witness)`` with witness the violating bid pair.
    """
    if instance.k != 1:
        raise DomainError("monotonicity probe is single-channel")
    grid = list(grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise DomainError("bid grid must be ascending")
    bids = list(bids) if bids is not None else [val.values[1] for val in instance.valuations]
    prev = None
    for b in grid:
        bids[v] = b
        wins = v in algorithm(instance.graph, instance.ordering.order, list(bids))
        if prev is not None and prev[1] and not wins:
            return False, (prev[0], b)
        prev = (b, wins)
    return True, None


# ---------------------------------------------------------------- misreports

def random_misreport(val, rng):
    """A random valuation of the same class and channel count as ``val``."""
    if isinstance(val, SymmetricValuation):
        top = max(val.full_value(), 1.0) * 2
        inc = rng.random(val.k) * top / val.k
        return SymmetricValuation(tuple(np.concatenate([[0.0], np.cumsum(inc)]).tolist()))
    if isinstance(val, MrsValuation):
        return random_mrs(val.k, rng, scale=max(val.full_value(), 1.0))
    raise DomainError("unsupported valuation class")


def random_mrs(k, rng, scale=5.0, max_terms=2):
    terms = []
    for _ in range(int(rng.integers(1, max_terms + 1))):
        w = float(rng.uniform(0, scale))
        if rng.random() < 0.5:
            terms.append((w, Uniform(int(rng.integers(1, k + 1)))))
        else:
            perm = rng.permutation(k)
            cut = int(rng.integers(1, k + 1))
            blocks = [tuple(perm[:cut].tolist())]
            if cut < k:
                blocks.append(tuple(perm[cut:].tolist()))
            caps = tuple(int(rng.integers(1, len(b) + 1)) for b in blocks)
            terms.append((w, Partition(tuple(blocks), caps)))
    return MrsValuation(k, tuple(terms))


def probe_csv(rows) -> str:
    """rows: iterables of (instance id, bidder, report id, delta, mode, seed)."""
    lines = ["instance,bidder,report,utility_delta,mode,seed"]
    for inst_id, bidder, rep, delta, mode, seed in rows:
        lines.append(f"{inst_id},{bidder},{rep},{float(delta)!r},{mode},{seed}")
    return "\n".join(lines) + "\n"
