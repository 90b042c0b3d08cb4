"""Randomized rounding of the count-form LP into feasible channel allocations.

``round_unweighted`` handles unweighted conflict graphs; ``round_weighted``
samples demands, filters them against earlier interference and hands them to
``allocate_small`` (randomized contention resolution) or ``allocate_large``
(deterministic rounds).

Threshold comparisons (i <= k/2, i <= k/8, weight sums against k/32) are done
after multiplying through by the power-of-two denominator, which is exact in
binary floating point.
"""

from __future__ import annotations

import math

import numpy as np

from specauction.errors import DomainError, ModeError, ParameterError, RoundingFailure
from specauction.graph import ConflictGraph, _as_order
from specauction.instance import Allocation
from specauction.rng import PHASE_ALLOCATE_SMALL, PHASE_DEMAND, as_seed, keyed

ALLOCATE_SMALL_C = 3
PROB_TOL = 1e-12
# an edgeless graph has rho 0; these floors make the sampling scale exactly 1
RHO_FLOOR_UNWEIGHTED = 0.25
RHO_FLOOR_WEIGHTED = 1 / 64


def effective_rho(rho, unweighted):
    """``rho`` raised to the floor that keeps the sampling scale (4 or 64 times rho) >= 1."""
    return max(float(rho), RHO_FLOOR_UNWEIGHTED if unweighted else RHO_FLOOR_WEIGHTED)


def split_solution(x, threshold: int):
    """Split count-form ``x`` (users x k, column i-1 is count i) at ``threshold``."""
    x = np.asarray(x, dtype=float)
    k = x.shape[1]
    if not 1 <= threshold <= k:
        raise DomainError("threshold must lie in 1..k")
    x1 = x.copy()
    x1[:, threshold:] = 0.0
    return x1, x - x1


def _low_threshold(k, denominator):
    """Largest count i with denominator * i <= k (0 if none)."""
    return k // denominator


def _split_at(x, denominator):
    x = np.asarray(x, dtype=float)
    k = x.shape[1]
    t = _low_threshold(k, denominator)
    if t == 0:
        return np.zeros_like(x), x.copy()
    return split_solution(x, t)


def sample_demands(x, scale, uniforms):
    """Pick count i for user v with probability ``x[v, i-1] / scale``, else 0.

    ``uniforms[v]`` is the user's own uniform draw, so the outcome of one user
    never shifts another user's randomness.
    """
    x = np.asarray(x, dtype=float)
    if scale <= 0:
        if np.any(x > 0):
            raise ParameterError("rho must be positive when x has mass")
        return np.zeros(x.shape[0], dtype=int)
    probs = x / scale
    cum = np.cumsum(probs, axis=1)
    if np.any(cum[:, -1] > 1 + PROB_TOL):
        raise ParameterError(
            f"sampling mass {cum[:, -1].max():.6g} exceeds 1; rho too small for x"
        )
    d = np.zeros(x.shape[0], dtype=int)
    for v in range(x.shape[0]):
        hit = np.nonzero(uniforms[v] < cum[v])[0]
        if len(hit):
            d[v] = hit[0] + 1
    return d


def welfare_score(valuations):
    """Score function ranking candidate allocations by realized welfare."""
    def score(alloc):
        return float(sum(val.values[len(st)] for val, st in zip(valuations, alloc.sets)))
    return score


def _best(candidates, score):
    best, best_w = None, None
    for alloc in candidates:
        w = score(alloc)
        if best_w is None or w > best_w:
            best, best_w = alloc, w
    return best


def _greedy_unweighted(g, order, d, k):
    adj = [set(u for u in range(g.n) if u != v and g.wbar[u, v] >= 1) for v in range(g.n)]
    sets = [frozenset()] * g.n
    pos = {v: i for i, v in enumerate(order)}
    for v in order:
        if d[v] == 0:
            continue
        taken = set()
        for u in adj[v]:
            if pos[u] < pos[v]:
                taken |= sets[u]
        free = [j for j in range(k) if j not in taken]
        if len(free) >= d[v]:
            sets[v] = frozenset(free[: d[v]])
    return Allocation(tuple(sets))


def round_unweighted(instance, x, rng, rho=None, trace=None) -> Allocation:
    """LP rounding for unweighted conflict graphs (scale 4*rho, split at k/2)."""
    instance.require("symmetric")
    rho = instance.rho if rho is None else rho
    return round_unweighted_core(instance.graph, instance.ordering.order, instance.k,
                                 x, rho, as_seed(rng),
                                 welfare_score(instance.valuations), trace)


def round_unweighted_core(g, order, k, x, rho, seed, score, trace=None) -> Allocation:
    if not g.unweighted:
        raise ModeError("round_unweighted needs an unweighted conflict graph")
    candidates = []
    for half, xl in enumerate(_split_at(x, 2)):
        u = keyed(seed, PHASE_DEMAND, half).random(g.n)
        d = sample_demands(xl, 4 * rho, u)
        candidates.append(_greedy_unweighted(g, order, d, k))
        if trace is not None:
            trace.append({"half": half, "demands": d.tolist()})
    return _best(candidates, score)


def zero_heavy_demands(g: ConflictGraph, order, d, k):
    """Zero a demand when earlier users' weighted demands reach k/32.

    Users are processed in increasing order, so a zeroed user no longer
    counts against later ones.
    """
    d = np.array(d, dtype=int)
    wb = g.wbar
    order = list(order)
    for p, v in enumerate(order):
        if d[v] == 0:
            continue
        earlier = order[:p]
        load = float(sum(d[u] * wb[u, v] for u in earlier))
        if 32 * load >= k:
            d[v] = 0
    return d


def round_weighted(instance, x, rng, rho=None, trace=None) -> Allocation:
    """LP rounding for weighted graphs (scale 64*rho, split at k/8)."""
    instance.require("symmetric")
    rho = instance.rho if rho is None else rho
    return round_weighted_core(instance.graph, instance.ordering.order, instance.k,
                               x, rho, as_seed(rng),
                               welfare_score(instance.valuations), trace)


def round_weighted_core(g, order, k, x, rho, seed, score, trace=None) -> Allocation:
    candidates = []
    for half, xl in enumerate(_split_at(x, 8)):
        u = keyed(seed, PHASE_DEMAND, half).random(g.n)
        raw = sample_demands(xl, 64 * rho, u)
        d = zero_heavy_demands(g, order, raw, k)
        rounds: list = []
        if half == 0:
            alloc = allocate_small(g, order, d, k, keyed(seed, PHASE_ALLOCATE_SMALL),
                                   score=score, trace=rounds)
        else:
            alloc = allocate_large(g, order, d, k, score=score, trace=rounds)
        candidates.append(alloc)
        if trace is not None:
            trace.append({"half": half, "sampled": raw.tolist(),
                          "demands": d.tolist(), "rounds": rounds})
    return _best(candidates, score)


def _check_small_pre(g, order, d, k):
    wb = g.wbar
    for p, v in enumerate(order):
        if d[v] == 0:
            continue
        if 8 * d[v] > k:
            raise DomainError(f"user {v} demands {d[v]} > k/8 channels")
        load = float(sum(d[u] * wb[u, v] for u in order[:p]))
        if 32 * load >= k:
            raise DomainError(f"user {v} has earlier weighted demand >= k/32")


def _check_large_pre(d, k):
    for v, dv in enumerate(d):
        if dv != 0 and 8 * dv < k:
            raise DomainError(f"user {v} demands {dv} < k/8 channels")
        if dv > k:
            raise DomainError(f"user {v} demands more than k channels")


def _select_round(g, order, remaining, d, k):
    """Scan remaining users by decreasing position; admit while weight stays below k/32."""
    wb = g.wbar
    admitted: list = []
    for u in reversed(order):
        if u not in remaining:
            continue
        load = float(sum(d[v] * wb[u, v] for v in admitted))
        if 32 * load < k:
            admitted.append(u)
    return admitted


def allocate_small_round_cap(n, k, c=ALLOCATE_SMALL_C):
    nk = max(n * k, 2)
    return max(1, math.ceil((c + 1) * math.log(nk) / math.log(4 / 3)))


def allocate_small(g: ConflictGraph, pi, d, k, rng, valuations=None, trace=None,
                   max_rounds=None, score=None) -> Allocation:
    """Rounds of randomized contention resolution for demands of at most k/8.

    Each round admits a set H of remaining users, lets every admitted user
    tentatively claim each channel with probability 8*d/k, keeps claims whose
    incoming symmetric weight from other claimants stays below 1, and allocates
    users that secured at least their demand.  The best round is returned.
    """
    order = list(_as_order(pi))
    d = np.asarray(d, dtype=int)
    _check_small_pre(g, order, d, k)
    n = g.n
    wb = g.wbar
    seed = as_seed(rng)
    remaining = {v for v in range(n) if d[v] > 0}
    cap = allocate_small_round_cap(n, k) if max_rounds is None else max_rounds
    rounds = []
    t = 0
    while remaining:
        if t >= cap:
            raise RoundingFailure(
                f"allocate_small exceeded {cap} rounds",
                {"remaining": sorted(remaining), "rounds": t},
            )
        admitted = _select_round(g, order, remaining, d, k)
        gen = keyed(seed, t)
        draws = gen.random((n, k))
        X = np.zeros((n, k), dtype=bool)
        for u in admitted:
            X[u] = draws[u] < 8 * d[u] / k
        sets = [frozenset()] * n
        hsub = np.array(admitted, dtype=int)
        for v in admitted:
            others = hsub[hsub != v]
            incoming = wb[others, v] @ X[others] if len(others) else np.zeros(k)
            good = [j for j in range(k) if X[v, j] and incoming[j] < 1]
            if len(good) >= d[v]:
                sets[v] = frozenset(good[: d[v]])
        alloc = Allocation(tuple(sets))
        rounds.append(alloc)
        if trace is not None:
            trace.append({
                "round": t,
                "admitted": sorted(admitted),
                "demand_admitted": int(sum(d[v] for v in admitted)),
                "demand_remaining": int(sum(d[v] for v in remaining)),
                "allocated": [v for v in admitted if sets[v]],
            })
        remaining -= {v for v in admitted if sets[v]}
        t += 1
    if not rounds:
        return Allocation.empty(n)
    return _best(rounds, _round_score(d, valuations, score))


def _round_score(d, valuations, score):
    """Explicit score, else welfare, else total satisfied demand."""
    if score is not None:
        return score
    if valuations is not None:
        return welfare_score(valuations)
    return lambda alloc: sum(int(d[v]) for v in range(alloc.n) if alloc.sets[v])


def allocate_large(g: ConflictGraph, pi, d, k, valuations=None, trace=None,
                   score=None) -> Allocation:
    """Deterministic rounds for demands of at least k/8: admitted users get 1..d."""
    order = list(_as_order(pi))
    d = np.asarray(d, dtype=int)
    _check_large_pre(d, k)
    n = g.n
    remaining = {v for v in range(n) if d[v] > 0}
    rounds = []
    t = 0
    while remaining:
        admitted = _select_round(g, order, remaining, d, k)
        sets = [frozenset()] * n
        for u in admitted:
            sets[u] = frozenset(range(d[u]))
        alloc = Allocation(tuple(sets))
        rounds.append(alloc)
        if trace is not None:
            trace.append({
                "round": t,
                "admitted": sorted(admitted),
                "demand_admitted": int(sum(d[v] for v in admitted)),
                "demand_remaining": int(sum(d[v] for v in remaining)),
            })
        remaining -= set(admitted)
        t += 1
    if not rounds:
        return Allocation.empty(n)
    return _best(rounds, _round_score(d, valuations, score))
