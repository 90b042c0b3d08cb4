"""Single-channel greedy algorithms for weighted independent set.

Both algorithms work on unweighted conflict graphs.  Arithmetic uses the bid
objects as given, so ``fractions.Fraction`` bids are processed exactly.
"""

from __future__ import annotations

from specauction.errors import ModeError
from specauction.graph import ConflictGraph, _as_order


def _require_unweighted(g):
    if not g.unweighted:
        raise ModeError("greedy algorithms need an unweighted conflict graph")


def _adjacency(g):
    wb = g.wbar
    return [set(u for u in range(g.n) if u != v and wb[u, v] >= 1) for v in range(g.n)]


def local_ratio_residuals(g: ConflictGraph, pi, bids) -> dict:
    """First pass of the local-ratio greedy: residual value of every vertex.

    Vertices are visited in decreasing order.  A vertex whose residual is
    positive at its turn subtracts that residual from every earlier neighbor;
    a vertex whose residual is <= 0 at its turn is dropped.
    """
    _require_unweighted(g)
    order = _as_order(pi)
    pos = {v: i for i, v in enumerate(order)}
    adj = _adjacency(g)
    val = {v: bids[v] for v in range(g.n)}
    for v in reversed(order):
        a = val[v]
        if a <= 0:
            continue
        for u in adj[v]:
            if pos[u] < pos[v]:
                val[u] = val[u] - a
    return val


def local_ratio_greedy(g: ConflictGraph, pi, bids, residuals=None) -> set:
    """Two-pass local-ratio greedy (not monotone in the bids)."""
    res = local_ratio_residuals(g, pi, bids)
    if residuals is not None:
        residuals.update(res)
    adj = _adjacency(g)
    chosen: set = set()
    for v in _as_order(pi):
        if res[v] > 0 and not (adj[v] & chosen):
            chosen.add(v)
    return chosen


def _forward_greedy(order, adj, members):
    chosen: set = set()
    for v in order:
        if v in members and not (adj[v] & chosen):
            chosen.add(v)
    return chosen


def monotone_greedy(g: ConflictGraph, pi, bids, trace=None) -> set:
    """Best of the forward greedy runs on every bid-threshold prefix.

    Only positive bids take part.  Prefix ``i`` holds every user bidding at
    least the i-th highest bid; the best prefix by total bid wins, ties going
    to the smaller prefix.
    """
    _require_unweighted(g)
    order = _as_order(pi)
    pos = {v: i for i, v in enumerate(order)}
    adj = _adjacency(g)
    ranked = sorted((v for v in range(g.n) if bids[v] > 0),
                    key=lambda v: (-bids[v], pos[v]))
    best, best_value = set(), None
    for v_i in ranked:
        threshold = bids[v_i]
        members = {v for v in ranked if bids[v] >= threshold}
        s = _forward_greedy(order, adj, members)
        total = sum((bids[v] for v in s), 0)
        if trace is not None:
            trace.append((threshold, sorted(s), total))
        if best_value is None or total > best_value:
            best, best_value = s, total
    return best


def set_value(bids, users) -> float:
    return sum((bids[v] for v in users), 0)
