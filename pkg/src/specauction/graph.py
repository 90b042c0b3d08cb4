"""Conflict graphs, independence, inductive independence, instance generators.

Users are the integers ``0..n-1``.  ``w[u, v]`` is the interference user ``u``
causes at user ``v`` when both share a channel.  An ordering is stored as the
sequence of users in increasing position, so ``order[0]`` is the first user.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from specauction.errors import DomainError, ModeError, SizeError

EXACT_RHO_ORDERING_LIMIT = 20
EXACT_RHO_LIMIT = 9
# Interference at zero distance is infinite; keep weights finite.
WEIGHT_CAP = 1e6


@dataclass(frozen=True, eq=False)
class ConflictGraph:
    """Directed, edge-weighted conflict graph.

    Attributes:
        w: n x n matrix of nonnegative finite weights with a zero diagonal.
        unweighted: every weight is 0 or 1 and the matrix is symmetric.
    """

    w: np.ndarray
    unweighted: bool = False

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DomainError("weight matrix must be square")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DomainError("weights must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise DomainError("self weights must be 0")
        if self.unweighted:
            if not np.all((w == 0) | (w == 1)):
                raise DomainError("unweighted graph needs weights in {0, 1}")
            if not np.array_equal(w, w.T):
                raise DomainError("unweighted graph must be symmetric")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def wbar(self) -> np.ndarray:
        """Symmetric weights w(u, v) + w(v, u)."""
        return self.w + self.w.T

    @classmethod
    def from_edges(cls, n, edges, unweighted=False):
        """Build from ``(u, v, weight)`` triples; missing pairs weigh 0."""
        w = np.zeros((n, n))
        for u, v, x in edges:
            w[u, v] = x
        return cls(w, unweighted=unweighted)

    @classmethod
    def from_undirected(cls, n, pairs):
        """Unweighted graph from undirected edge pairs."""
        w = np.zeros((n, n))
        for u, v in pairs:
            if u == v:
                raise DomainError("self loops are not allowed")
            w[u, v] = w[v, u] = 1.0
        return cls(w, unweighted=True)

    def neighbors(self, v) -> list[int]:
        wb = self.wbar
        return [u for u in range(self.n) if u != v and wb[u, v] >= 1]

    def edges(self):
        """Nonzero directed entries as ``(u, v, weight)``."""
        us, vs = np.nonzero(self.w)
        return [(int(u), int(v), float(self.w[u, v])) for u, v in zip(us, vs)]


@dataclass(frozen=True)
class Ordering:
    """Vertex ordering together with a claimed inductive-independence bound."""

    order: tuple
    rho: float
    verified: bool = False
    pos: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise DomainError("ordering must be a permutation of 0..n-1")
        if not self.rho >= 0:
            raise DomainError("rho must be nonnegative")
        pos = [0] * len(order)
        for i, v in enumerate(order):
            pos[v] = i
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "pos", tuple(pos))

    @classmethod
    def identity(cls, n, rho=0.0, verified=False):
        return cls(tuple(range(n)), rho, verified)

    def earlier(self, v) -> list[int]:
        return list(self.order[: self.pos[v]])


def _as_order(pi) -> tuple:
    if isinstance(pi, Ordering):
        return pi.order
    return tuple(int(v) for v in pi)


def symmetric_weight(g: ConflictGraph, u: int, v: int) -> float:
    if u == v:
        raise DomainError("symmetric weight undefined for u == v")
    return float(g.w[u, v] + g.w[v, u])


def is_independent(g: ConflictGraph, users: Iterable[int]) -> bool:
    """True iff every member receives total weight < 1 from the others."""
    idx = sorted(set(int(u) for u in users))
    if len(idx) <= 1:
        return True
    incoming = g.w[np.ix_(idx, idx)].sum(axis=0)
    return bool(np.all(incoming < 1))


def incoming_weights(g: ConflictGraph, users: Iterable[int]) -> dict:
    """Map each member of ``users`` to its incoming weight from the others."""
    idx = sorted(set(int(u) for u in users))
    if not idx:
        return {}
    incoming = g.w[np.ix_(idx, idx)].sum(axis=0)
    return {u: float(x) for u, x in zip(idx, incoming)}


def max_weight_independent(g: ConflictGraph, candidates, weights):
    """Exact max-weight independent subset of ``candidates`` (branch and bound).

    ``weights`` is indexable by user and nonnegative.  Returns
    ``(value, members)``.
    """
    cand = [u for u in candidates if weights[u] > 0]
    cand.sort(key=lambda u: (-weights[u], u))
    suffix = [0.0] * (len(cand) + 1)
    for i in range(len(cand) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + weights[cand[i]]
    w = g.w
    best = [0.0, []]
    incoming = np.zeros(g.n)
    chosen: list[int] = []

    def dfs(i, value):
        if value > best[0]:
            best[0] = value
            best[1] = list(chosen)
        if i == len(cand) or value + suffix[i] <= best[0]:
            return
        u = cand[i]
        # u joins only if it and every current member stay below 1
        if incoming[u] < 1 and all(incoming[m] + w[u, m] < 1 for m in chosen):
            chosen.append(u)
            incoming[:] += w[u]
            dfs(i + 1, value + weights[u])
            incoming[:] -= w[u]
            chosen.pop()
        dfs(i + 1, value)

    dfs(0, 0.0)
    return best[0], sorted(best[1])


def rho_of_ordering(g: ConflictGraph, pi, bound_only: bool = False) -> float:
    """Largest symmetric weight any vertex receives from an earlier independent set.

    The exact mode searches independent subsets and is limited to
    ``EXACT_RHO_ORDERING_LIMIT`` vertices; ``bound_only`` returns the cheap
    upper bound obtained by ignoring independence.
    """
    order = _as_order(pi)
    if sorted(order) != list(range(g.n)):
        raise DomainError("ordering must be a permutation of the users")
    if not bound_only and g.n > EXACT_RHO_ORDERING_LIMIT:
        raise SizeError(
            f"exact rho search limited to n <= {EXACT_RHO_ORDERING_LIMIT}; "
            "pass bound_only=True"
        )
    wb = g.wbar
    rho = 0.0
    for p, v in enumerate(order):
        earlier = list(order[:p])
        if not earlier:
            continue
        if bound_only:
            val = float(wb[earlier, v].sum())
        else:
            val, _ = max_weight_independent(g, earlier, wb[:, v])
        rho = max(rho, val)
    return rho


def _independent_masks(g: ConflictGraph) -> np.ndarray:
    n = g.n
    indep = np.zeros(1 << n, dtype=bool)
    for mask in range(1 << n):
        members = [u for u in range(n) if mask >> u & 1]
        indep[mask] = is_independent(g, members)
    return indep


def exact_rho(g: ConflictGraph):
    """Minimum of ``rho_of_ordering`` over all orderings, with a witness.

    Dynamic program over vertex subsets: the cost of a vertex depends only on
    the set that precedes it, not on that set's internal order.
    """
    n = g.n
    if n > EXACT_RHO_LIMIT:
        raise SizeError(f"exact_rho limited to n <= {EXACT_RHO_LIMIT}")
    if n == 0:
        return 0.0, ()
    wb = g.wbar
    full = (1 << n) - 1
    indep = _independent_masks(g)
    # reach[v][P]: best incoming symmetric weight at v from an independent M within P
    reach = np.full((n, 1 << n), -np.inf)
    for v in range(n):
        row = reach[v]
        for mask in range(1 << n):
            if mask >> v & 1:
                continue
            best = 0.0
            if indep[mask]:
                best = float(sum(wb[u, v] for u in range(n) if mask >> u & 1))
            m = mask
            while m:
                low = m & -m
                best = max(best, row[mask ^ low])
                m ^= low
            row[mask] = best
    cost = np.full(1 << n, np.inf)
    last = np.full(1 << n, -1, dtype=int)
    cost[0] = 0.0
    for mask in range(1, 1 << n):
        for v in range(n - 1, -1, -1):
            if not mask >> v & 1:
                continue
            prev = mask ^ (1 << v)
            c = max(cost[prev], reach[v][prev])
            if c < cost[mask]:
                cost[mask] = c
                last[mask] = v
    order = []
    mask = full
    while mask:
        v = int(last[mask])
        order.append(v)
        mask ^= 1 << v
    order.reverse()
    return float(cost[full]), tuple(order)


def earlier_neighbors(g: ConflictGraph, pi, v: int) -> set:
    """Neighbors of ``v`` (symmetric weight >= 1) that precede it in ``pi``."""
    if not g.unweighted:
        raise ModeError("earlier_neighbors is defined for unweighted graphs")
    order = _as_order(pi)
    p = order.index(v)
    wb = g.wbar
    return {u for u in order[:p] if wb[u, v] >= 1}


def _ordering_with_rho(g, order, exact_limit=EXACT_RHO_ORDERING_LIMIT):
    if g.n <= exact_limit:
        return Ordering(order, rho_of_ordering(g, order), verified=True)
    return Ordering(order, rho_of_ordering(g, order, bound_only=True), verified=True)


def gen_protocol_model(points, conflict_radius: float, seed: int = 0):
    """Unit-disk style protocol model: an edge joins users within the radius.

    Users are ordered by nondecreasing degree, ties by index.  ``seed`` is
    accepted for interface uniformity; the construction is deterministic.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if conflict_radius <= 0:
        raise DomainError("conflict radius must be positive")
    n = len(pts)
    if len({tuple(p) for p in pts.tolist()}) != n:
        raise DomainError("points must be distinct")
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    adj = (d <= conflict_radius).astype(float)
    np.fill_diagonal(adj, 0.0)
    g = ConflictGraph(adj, unweighted=True)
    deg = adj.sum(axis=1)
    order = tuple(sorted(range(n), key=lambda v: (deg[v], v)))
    return g, _ordering_with_rho(g, order)


def _link_geometry(links):
    arr = np.asarray(links, dtype=float).reshape(-1, 2, 2)
    senders, receivers = arr[:, 0, :], arr[:, 1, :]
    length = np.sqrt(((senders - receivers) ** 2).sum(axis=1))
    if np.any(length == 0):
        raise DomainError("links must have distinct sender and receiver")
    # cross[u, v]: distance from sender of u to receiver of v
    cross = np.sqrt(((senders[:, None, :] - receivers[None, :, :]) ** 2).sum(axis=2))
    return length, cross


def affectance_weights(links, pathloss_exponent, sinr_threshold, noise):
    """Normalized interference of link u at the receiver of link v (unit power)."""
    length, cross = _link_geometry(links)
    signal = length ** (-pathloss_exponent)
    margin = signal - sinr_threshold * noise
    if np.any(margin <= 0):
        raise DomainError("a link cannot reach the SINR threshold even alone")
    with np.errstate(divide="ignore"):
        interference = cross ** (-pathloss_exponent)
    w = sinr_threshold * interference / margin[None, :]
    w = np.minimum(w, WEIGHT_CAP)
    np.fill_diagonal(w, 0.0)
    return w


def sinr_feasible(links, users, pathloss_exponent, sinr_threshold, noise) -> bool:
    """Direct SINR check: every chosen receiver's SINR exceeds the threshold."""
    users = sorted(set(users))
    if not users:
        return True
    length, cross = _link_geometry(links)
    with np.errstate(divide="ignore"):
        signal = length ** (-pathloss_exponent)
        gain = cross ** (-pathloss_exponent)
    for v in users:
        interference = sum(gain[u, v] for u in users if u != v)
        if not signal[v] > sinr_threshold * (noise + interference):
            return False
    return True


def gen_physical_model(
    links,
    pathloss_exponent: float,
    sinr_threshold: float,
    noise: float,
    seed: int = 0,
):
    """Weighted conflict graph of the physical (SINR) interference model.

    ``links`` is a sequence of ``((sx, sy), (rx, ry))`` pairs.  Users are ordered
    by increasing link length, ties by index.
    """
    if pathloss_exponent <= 2:
        raise DomainError("path-loss exponent must exceed 2")
    if sinr_threshold <= 0 or noise < 0:
        raise DomainError("threshold must be positive and noise nonnegative")
    w = affectance_weights(links, pathloss_exponent, sinr_threshold, noise)
    g = ConflictGraph(w)
    length, _ = _link_geometry(links)
    order = tuple(sorted(range(g.n), key=lambda v: (length[v], v)))
    return g, _ordering_with_rho(g, order)


def gen_random_graph(n: int, edge_prob: float, weighted: bool, seed: int):
    """Erdos-Renyi style graph; weighted graphs draw directed weights in [0, 0.6)."""
    rng = np.random.default_rng(seed)
    if weighted:
        mask = rng.random((n, n)) < edge_prob
        w = np.where(mask, rng.random((n, n)) * 0.6, 0.0)
        np.fill_diagonal(w, 0.0)
        g = ConflictGraph(w)
    else:
        upper = np.triu(rng.random((n, n)) < edge_prob, 1)
        adj = (upper | upper.T).astype(float)
        g = ConflictGraph(adj, unweighted=True)
    if n <= EXACT_RHO_LIMIT:
        rho, order = exact_rho(g)
        return g, Ordering(order, rho, verified=True)
    order = tuple(range(n))
    return g, _ordering_with_rho(g, order)


def graph_to_dict(g: ConflictGraph, ordering: Ordering | None = None) -> dict:
    out = {
        "n": g.n,
        "unweighted": bool(g.unweighted),
        "edges": [{"from": u, "to": v, "w": x} for u, v, x in g.edges()],
    }
    if ordering is not None:
        out["pi"] = list(ordering.order)
        out["rho"] = float(ordering.rho)
    return out


def graph_from_dict(data: dict):
    n = int(data["n"])
    w = np.zeros((n, n))
    for e in data.get("edges", []):
        u, v = int(e["from"]), int(e["to"])
        if not (0 <= u < n and 0 <= v < n):
            raise DomainError(f"edge endpoint out of range: {u}->{v}")
        w[u, v] = float(e["w"])
    g = ConflictGraph(w, unweighted=bool(data.get("unweighted", False)))
    ordering = None
    if "pi" in data:
        ordering = Ordering(tuple(data["pi"]), float(data.get("rho", 0.0)))
    return g, ordering


def all_orderings(n: int) -> Iterable[Sequence[int]]:
    return itertools.permutations(range(n))
