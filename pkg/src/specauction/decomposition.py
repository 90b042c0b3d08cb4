"""Convex decompositions of scaled fractional points into feasible integral ones.

Column generation replaces the ellipsoid-based separation: the master LP
``min sum(lam)  s.t.  sum_l lam_l g_l >= x / alpha`` is re-solved while an
approximation oracle finds columns violating the dual.  When the oracle can no
longer separate, the master value ``tau`` certifies a decomposition at
``alpha * tau``; alpha is then doubled as often as needed.  Dominance is turned
into exact marginal equality by deleting users from entries (subsets of
feasible sets stay feasible), and a basic solution of the equality system
prunes the support to at most (#marginal rows + 1) entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from specauction.errors import DecompositionError
from specauction.graph import ConflictGraph, _as_order, is_independent, max_weight_independent
from specauction.greedy import local_ratio_greedy
from specauction.instance import Allocation
from specauction.lp import build_count_lp, build_single_channel_lp, solve_packing_lp
from specauction.rng import PHASE_ORACLE, keyed
from specauction.rounding import effective_rho, round_unweighted_core, round_weighted_core
from specauction.search import best_allocation

MAX_DOUBLINGS = 10
SEPARATION_TOL = 1e-9
MARGINAL_TOL = 1e-7
SUM_TOL = 1e-9
MAX_COLUMNS = 2000
ORACLE_SAMPLES = 8


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Probability-weighted feasible solutions.

    For ``kind == "channel"`` every entry is a frozenset of users; for
    ``kind == "count"`` every entry is an ``Allocation``.
    """

    entries: tuple
    alpha_achieved: float
    kind: str = "channel"
    doublings: int = 0
    alpha_start: float = 1.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return np.array([lam for lam, _ in self.entries])

    def channel_marginals(self, n) -> np.ndarray:
        out = np.zeros(n)
        for lam, s in self.entries:
            for v in s:
                out[v] += lam
        return out

    def count_marginals(self, n, k) -> np.ndarray:
        out = np.zeros((n, k))
        for lam, alloc in self.entries:
            for v, s in enumerate(alloc.sets):
                if s:
                    out[v, len(s) - 1] += lam
        return out

    def pick(self, u: float):
        """Entry selected by a uniform draw ``u`` (cumulative weights)."""
        acc = 0.0
        for lam, item in self.entries:
            acc += lam
            if u < acc:
                return item
        return self.entries[-1][1]

    def to_dict(self):
        if self.kind == "channel":
            ents = [{"lambda": lam, "set": sorted(s)} for lam, s in self.entries]
        else:
            ents = [{"lambda": lam, "allocation": a.to_dict()["sets"]}
                    for lam, a in self.entries]
        return {"kind": self.kind, "alpha_achieved": self.alpha_achieved,
                "alpha_start": self.alpha_start, "doublings": self.doublings,
                "entries": ents}


# ---------------------------------------------------------------- oracles

def greedy_oracle(g: ConflictGraph, pi, a) -> set:
    """Local-ratio greedy independent set for nonnegative weights ``a``."""
    return local_ratio_greedy(g, pi, list(a))


def filter_oracle(g: ConflictGraph, pi, rho, x, rng) -> set:
    """Randomized filter rounding of a fractional point on a weighted graph.

    Sample each user with probability ``x_v / (4 rho)``; in increasing order
    drop a sample whose symmetric weight from kept earlier users reaches 1/2;
    finally drop, in increasing order, any user whose incoming weight from the
    kept set reaches 1.
    """
    order = list(_as_order(pi))
    x = np.asarray(x, dtype=float)
    scale = 4 * rho if rho > 0 else 1.0
    probs = np.clip(x / scale, 0.0, 1.0)
    draws = rng.random(g.n)
    wb = g.wbar
    kept: list = []
    for v in order:
        if draws[v] < probs[v]:
            if 2 * float(sum(wb[u, v] for u in kept)) < 1:
                kept.append(v)
    keep = set(kept)
    for v in order:
        if v in keep:
            incoming = float(sum(g.w[u, v] for u in keep if u != v))
            if incoming >= 1:
                keep.discard(v)
    return keep


def _weighted_greedy(g, weights):
    """Add users by decreasing weight while the set stays independent."""
    chosen: list = []
    for v in sorted(range(g.n), key=lambda u: (-weights[u], u)):
        if weights[v] <= 0:
            break
        if is_independent(g, chosen + [v]):
            chosen.append(v)
    return set(chosen)


def _seed_sets(g, order, x):
    """Initial columns: greedy sets for the point's own weights and for the ordering."""
    out = [_weighted_greedy(g, x)]
    if g.unweighted:
        out.append(greedy_oracle(g, order, x))
    for seq in (order, order[::-1]):
        chosen: list = []
        for v in seq:
            if x[v] > 0 and is_independent(g, chosen + [v]):
                chosen.append(v)
        out.append(set(chosen))
    return out


def default_alpha(g: ConflictGraph, rho: float) -> float:
    """Scaling at which the default oracle is guaranteed (or expected) to separate.

    Unweighted graphs: the local-ratio greedy loses at most 1 + rho/2 against
    the single-channel LP (rho counts symmetric weight 2 per edge).  Weighted
    graphs use the randomized filter with start value 4 rho ceil(log2 n).
    """
    if g.unweighted:
        return max(1.0, 1.0 + rho / 2.0)
    return max(1.0, 4.0 * rho * max(1, math.ceil(math.log2(max(g.n, 2)))))


def channel_pricer(g: ConflictGraph, order, rho, oracle=None, seed=0):
    """Build ``price(y)``, a generator of candidate batches for the single-channel master.

    Cheap greedy candidates come first; the LP-backed filter oracle is only
    consulted when they fail to separate.
    """
    if oracle is None:
        oracle = "greedy" if g.unweighted else "filter"

    def price(y):
        if oracle == "exact":
            _, members = max_weight_independent(g, range(g.n), y)
            yield [set(members)]
            return
        cheap = [_weighted_greedy(g, y)]
        if g.unweighted:
            cheap.insert(0, greedy_oracle(g, order, y))
        yield cheap
        if oracle == "filter":
            sol = solve_packing_lp(build_single_channel_lp(g, order, rho, y))
            yield [filter_oracle(g, order, rho, sol.x, keyed(seed, PHASE_ORACLE, s))
                   for s in range(ORACLE_SAMPLES)]

    return price


# ---------------------------------------------------------------- engine

def _master(columns, target):
    """Solve min sum(lam) s.t. C lam >= target; return (lam, tau, duals)."""
    C = np.column_stack(columns)
    res = linprog(np.ones(C.shape[1]), A_ub=-C, b_ub=-target, bounds=(0, None),
                  method="highs-ds")
    if res.status != 0:
        raise DecompositionError(f"master LP failed: {res.message}")
    return np.asarray(res.x), float(res.fun), -np.asarray(res.ineqlin.marginals)


def _column_generation(target, columns, keys, coef, price):
    seen = set(keys)
    while True:
        lam, tau, y = _master(columns, target)
        if tau <= 1 + SUM_TOL:
            # already decomposable at this scaling; no need for the exact minimum
            return lam, tau, y
        added = 0
        for batch in price(y):
            for cand in batch:
                key = frozenset(cand) if not isinstance(cand, Allocation) else cand.sets
                vec = coef(cand)
                if key in seen or float(y @ vec) <= 1 + SEPARATION_TOL:
                    continue
                seen.add(key)
                keys.append(key)
                columns.append(vec)
                added += 1
            if added:
                break
        if not added or len(columns) > MAX_COLUMNS:
            return lam, tau, y


def _basic_equality_solution(columns, target):
    """Basic feasible lam >= 0 with C lam = target and sum(lam) = 1, polished."""
    C = np.column_stack(columns)
    M = np.vstack([C, np.ones(C.shape[1])])
    rhs = np.concatenate([target, [1.0]])
    res = linprog(np.zeros(C.shape[1]), A_eq=M, b_eq=rhs, bounds=(0, None),
                  method="highs-ds")
    if res.status != 0:
        return None
    lam = np.asarray(res.x)
    support = np.nonzero(lam > 1e-14)[0]
    sub = M[:, support]
    sol, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
    err_new = np.max(np.abs(sub @ sol - rhs))
    err_old = np.max(np.abs(sub @ lam[support] - rhs))
    if np.all(sol >= 0) and err_new < err_old + 1e-15:
        lam = np.zeros_like(lam)
        lam[support] = sol
    lam = np.maximum(lam, 0.0)
    return lam


def _trim(entries, excess, remove):
    """Turn dominance into equality by deleting row members from entries."""
    entries = [list(e) for e in entries]
    for row, extra in enumerate(excess):
        rem = float(extra)
        if rem <= 0:
            continue
        for e in list(entries):
            if rem <= 0:
                break
            lam, item = e
            if lam <= 0:
                continue
            reduced = remove(item, row)
            if reduced is None:
                continue
            m = min(lam, rem)
            if m >= lam:
                e[1] = reduced
            else:
                e[0] = lam - m
                entries.append([m, reduced])
            rem -= m
    return entries


def _finish(target, lam, keys, coef, remove, empty, merge_key):
    entries = [[float(w), item] for w, item in zip(lam, keys) if w > 0]
    if entries:
        cols = np.column_stack([coef(item) for _, item in entries])
        achieved = cols @ np.array([e[0] for e in entries])
    else:
        achieved = np.zeros(len(target))
    entries = _trim(entries, achieved - target, remove)
    total = sum(e[0] for e in entries)
    entries.append([max(0.0, 1.0 - total), empty])
    merged: dict = {}
    for w, item in entries:
        key = merge_key(item)
        if key in merged:
            merged[key][0] += w
        else:
            merged[key] = [w, item]
    items = [it for _, it in merged.values()]
    lam = np.array([w for w, _ in merged.values()])
    if len(items) > len(target) + 1:
        basic = _basic_equality_solution([coef(it) for it in items], target)
        if basic is not None:
            lam = basic
    out = [(float(w), it) for w, it in zip(lam, items) if w > 0]
    total = sum(w for w, _ in out)
    return tuple((w / total, it) for w, it in out)


def _scale_search(target_unscaled, alpha_start, run):
    """Run column generation at alpha_start and double alpha until tau <= 1."""
    if alpha_start < 1:
        raise DecompositionError("alpha_start must be at least 1")
    target = target_unscaled / alpha_start
    lam, tau, y = run(target)
    doublings = 0
    if tau > 1 + SUM_TOL:
        doublings = max(1, math.ceil(math.log2(tau) - 1e-12))
        while tau / 2**doublings > 1 + SUM_TOL:
            doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise DecompositionError(
                f"oracle failed to separate at alpha cap {alpha_start * 2**MAX_DOUBLINGS}",
                dual_witness=y,
            )
        lam = lam / 2**doublings
    alpha = alpha_start * 2**doublings
    return lam, alpha, doublings, tau


def decompose_channel(g: ConflictGraph, pi, rho, x_col, alpha_start=None,
                      oracle=None, seed=0) -> Decomposition:
    """Decompose a single-channel point: sum lam_l g_l = x / alpha, sum lam = 1."""
    order = _as_order(pi)
    x = np.clip(np.asarray(x_col, dtype=float), 0.0, None)
    n = g.n
    alpha_start = default_alpha(g, rho) if alpha_start is None else float(alpha_start)
    rows = [v for v in range(n) if x[v] > 0]
    if not rows:
        return Decomposition(((1.0, frozenset()),), alpha_start, "channel", 0, alpha_start)
    row_of = {v: r for r, v in enumerate(rows)}
    price_users = channel_pricer(g, order, rho, oracle, seed)

    def coef(s):
        vec = np.zeros(len(rows))
        for v in s:
            if v in row_of:
                vec[row_of[v]] = 1.0
        return vec

    def price(y):
        full = np.zeros(n)
        full[rows] = y
        for batch in price_users(full):
            yield [frozenset(s) for s in batch]

    keys = [frozenset({v}) for v in rows]
    for s in _seed_sets(g, order, x):
        s = frozenset(s) & frozenset(rows)
        if len(s) > 1 and s not in keys:
            keys.append(s)

    def run(target):
        columns = [coef(s) for s in keys]
        return _column_generation(target, columns, keys, coef, price)

    lam, alpha, doublings, tau = _scale_search(x[rows], alpha_start, run)
    target = x[rows] / alpha

    def remove(s, r):
        v = rows[r]
        return s - {v} if v in s else None

    entries = _finish(target, lam, keys, coef, remove, frozenset(), lambda s: s)
    return Decomposition(entries, alpha, "channel", doublings, alpha_start,
                         {"master_value": tau, "columns": len(keys)})


def default_count_alpha(g: ConflictGraph, rho: float, n: int, k: int) -> float:
    """Scaling matched to the symmetric rounding guarantees."""
    if g.unweighted:
        return max(1.0, 16.0 * rho)
    return max(1.0, 256.0 * rho * max(1, math.ceil(math.log2(max(n * k, 2)))))


def count_pricer(g: ConflictGraph, order, rho, k, oracle=None, seed=0):
    """``price(y)`` yields batches of candidate Allocations for weights ``y[v, i-1]``."""

    def score_of(y):
        def score(alloc):
            return float(sum(y[v, len(s) - 1] for v, s in enumerate(alloc.sets) if s))
        return score

    def price(y):
        if oracle == "exact":
            yield [best_allocation(g, k, lambda v, s: y[v, len(s) - 1] if s else 0.0)]
            return
        yield [_count_greedy(g, k, y)]
        if not np.any(y > 0):
            return
        sol = solve_packing_lp(build_count_lp(g, order, rho, k, y))
        score = score_of(y)
        batch = []
        for s in range(ORACLE_SAMPLES):
            sseed = int(keyed(seed, PHASE_ORACLE, s).integers(0, 2**63 - 1))
            if g.unweighted:
                batch.append(round_unweighted_core(g, order, k, sol.x, effective_rho(rho, True),
                                                   sseed, score))
            else:
                batch.append(round_weighted_core(g, order, k, sol.x, effective_rho(rho, False),
                                                 sseed, score))
        yield batch

    return price


def _count_greedy(g, k, y):
    """Give (user, count) pairs by decreasing weight the lowest feasible channels."""
    n = g.n
    members = [[] for _ in range(k)]
    sets = [frozenset()] * n
    pairs = sorted(((y[v, i], v, i + 1) for v in range(n) for i in range(k) if y[v, i] > 0),
                   key=lambda t: (-t[0], t[1], t[2]))
    for _, v, cnt in pairs:
        if sets[v]:
            continue
        ok = [j for j in range(k) if is_independent(g, members[j] + [v])]
        if len(ok) >= cnt:
            chosen = ok[:cnt]
            for j in chosen:
                members[j].append(v)
            sets[v] = frozenset(chosen)
    return Allocation(tuple(sets))


def decompose_count_solution(instance, x, alpha_start=None, oracle=None, seed=0,
                             rho=None) -> Decomposition:
    """Decompose count-form ``x`` (n x k) into full allocations.

    Entry marginals satisfy: sum over entries giving user v exactly i channels
    equals ``x[v, i-1] / alpha``.
    """
    g = instance.graph
    order = instance.ordering.order
    n, k = instance.n, instance.k
    rho = instance.rho if rho is None else rho
    x = np.clip(np.asarray(x, dtype=float).reshape(n, k), 0.0, None)
    alpha_start = (default_count_alpha(g, rho, n, k) if alpha_start is None
                   else float(alpha_start))
    rows = [(v, i) for v in range(n) for i in range(k) if x[v, i] > 0]
    if not rows:
        return Decomposition(((1.0, Allocation.empty(n)),), alpha_start, "count", 0,
                             alpha_start)
    row_of = {vi: r for r, vi in enumerate(rows)}
    price_y = count_pricer(g, order, rho, k, oracle, seed)

    def coef(alloc):
        vec = np.zeros(len(rows))
        for v, s in enumerate(alloc.sets):
            r = row_of.get((v, len(s) - 1)) if s else None
            if r is not None:
                vec[r] = 1.0
        return vec

    def price(y):
        full = np.zeros((n, k))
        for (v, i), val in zip(rows, y):
            full[v, i] = val
        yield from price_y(full)

    keys = []
    for v, i in rows:
        sets = [frozenset()] * n
        sets[v] = frozenset(range(i + 1))
        keys.append(Allocation(tuple(sets)))
    key_sets = [a.sets for a in keys]

    def run(target):
        columns = [coef(a) for a in keys]
        alloc_keys = list(key_sets)
        out = _column_generation(target, columns, alloc_keys, coef, price)
        # keys grows alongside columns; rebuild Allocation list from sets
        keys[:] = [Allocation(s) for s in alloc_keys]
        return out

    lam, alpha, doublings, tau = _scale_search(x.ravel()[[v * k + i for v, i in rows]],
                                               alpha_start, run)
    target = np.array([x[v, i] for v, i in rows]) / alpha

    def remove(alloc, r):
        v, i = rows[r]
        if len(alloc.sets[v]) != i + 1:
            return None
        sets = list(alloc.sets)
        sets[v] = frozenset()
        return Allocation(tuple(sets))

    entries = _finish(target, lam, keys, coef, remove, Allocation.empty(n), lambda a: a.sets)
    return Decomposition(entries, alpha, "count", doublings, alpha_start,
                         {"master_value": tau, "columns": len(keys)})


def verify_decomposition(dec: Decomposition, x, alpha=None, graph=None,
                         tol=MARGINAL_TOL):
    """Check weights sum to 1, every entry is feasible, and marginals equal x / alpha.

    Returns ``(ok, max_marginal_error)``.
    """
    alpha = dec.alpha_achieved if alpha is None else alpha
    x = np.asarray(x, dtype=float)
    lam = dec.weights
    ok = bool(np.all(lam >= 0)) and abs(lam.sum() - 1.0) <= SUM_TOL
    if dec.kind == "channel":
        marg = dec.channel_marginals(len(x))
        if graph is not None:
            ok &= all(is_independent(graph, s) for _, s in dec.entries)
    else:
        n, k = x.shape
        marg = dec.count_marginals(n, k)
        if graph is not None:
            ok &= all(a.is_feasible(graph) for _, a in dec.entries)
    err = float(np.max(np.abs(marg - x / alpha))) if x.size else 0.0
    return bool(ok and err <= tol), err
