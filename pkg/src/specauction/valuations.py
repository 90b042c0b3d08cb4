"""Bidder valuations and their lottery values.

Channels are the integers ``0..k-1``.  A channel subset is any iterable of
channel indices; internally subsets are bitmasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from specauction.errors import DomainError, SizeError

LOTTERY_LIMIT = 20


def _mask(channels, k) -> int:
    m = 0
    for j in channels:
        j = int(j)
        if not 0 <= j < k:
            raise DomainError(f"channel {j} out of range for k={k}")
        m |= 1 << j
    return m


def _popcounts(k) -> np.ndarray:
    masks = np.arange(1 << k)
    return np.array([bin(m).count("1") for m in masks.tolist()], dtype=int)


@dataclass(frozen=True)
class Uniform:
    """Uniform matroid of rank ``r``: rank(T) = min(|T|, r)."""

    r: int

    def rank_table(self, k):
        return np.minimum(_popcounts(k), self.r).astype(float)

    def to_dict(self):
        return {"kind": "uniform", "r": self.r}


@dataclass(frozen=True)
class Partition:
    """Partition matroid: rank(T) = sum over blocks of min(|T & block|, cap)."""

    blocks: tuple
    caps: tuple

    def __post_init__(self):
        blocks = tuple(tuple(sorted(int(j) for j in b)) for b in self.blocks)
        seen = [j for b in blocks for j in b]
        if len(seen) != len(set(seen)):
            raise DomainError("partition blocks must be disjoint")
        if len(blocks) != len(self.caps) or any(c < 0 for c in self.caps):
            raise DomainError("need one nonnegative cap per block")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))

    def rank_table(self, k):
        table = np.zeros(1 << k)
        for block, cap in zip(self.blocks, self.caps):
            table += np.minimum(_block_counts(k, block), cap)
        return table

    def to_dict(self):
        return {"kind": "partition", "blocks": [list(b) for b in self.blocks],
                "caps": list(self.caps)}


def _block_counts(k, block):
    bm = _mask(block, k)
    return np.array([bin(m & bm).count("1") for m in range(1 << k)], dtype=int)


@dataclass(frozen=True)
class Coverage:
    """Weighted coverage: the value of T is the weight of elements covered by T.

    ``covers[j]`` lists the elements channel ``j`` covers.  Coverage is a
    matroid-rank sum: element ``e`` contributes ``weights[e] * min(1, |T & C_e|)``
    where ``C_e`` are the channels covering ``e`` (a rank-1 partition matroid).
    """

    weights: tuple
    covers: tuple

    def __post_init__(self):
        weights = tuple(float(x) for x in self.weights)
        if any(x < 0 for x in weights):
            raise DomainError("element weights must be nonnegative")
        covers = tuple(tuple(sorted(int(e) for e in c)) for c in self.covers)
        for c in covers:
            for e in c:
                if not 0 <= e < len(weights):
                    raise DomainError(f"element {e} out of range")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "covers", covers)

    def as_partition_terms(self):
        """The reduction to ``(weight, Partition)`` terms, one per element."""
        terms = []
        for e, x in enumerate(self.weights):
            chans = tuple(j for j, c in enumerate(self.covers) if e in c)
            if chans:
                terms.append((x, Partition((chans,), (1,))))
        return terms

    def rank_table(self, k):
        if len(self.covers) > k:
            raise DomainError("coverage lists more channels than k")
        table = np.zeros(1 << k)
        for x, part in self.as_partition_terms():
            table += x * part.rank_table(k)
        return table

    def to_dict(self):
        return {"kind": "coverage", "weights": list(self.weights),
                "covers": [list(c) for c in self.covers]}


def rank_from_dict(d):
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(int(d["r"]))
    if kind == "partition":
        return Partition(tuple(d["blocks"]), tuple(d["caps"]))
    if kind == "coverage":
        return Coverage(tuple(d["weights"]), tuple(d["covers"]))
    raise DomainError(f"unknown rank descriptor {kind!r}")


@dataclass(frozen=True, eq=False)
class SymmetricValuation:
    """Value depends only on the number of channels: ``values[i]`` for i channels."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(x) for x in self.values)
        if not vals or vals[0] != 0:
            raise DomainError("symmetric valuation needs b(0) = 0")
        if any(x < 0 for x in vals):
            raise DomainError("values must be nonnegative")
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise DomainError("symmetric valuation must be nondecreasing")
        object.__setattr__(self, "values", vals)

    @property
    def k(self):
        return len(self.values) - 1

    def count_value(self, i: int) -> float:
        return self.values[i]

    def full_value(self) -> float:
        return self.values[-1]

    @cached_property
    def table(self):
        return np.asarray(self.values)[_popcounts(self.k)]

    def to_dict(self):
        return {"type": "symmetric", "values": list(self.values)}

    def __eq__(self, other):
        return isinstance(other, SymmetricValuation) and self.values == other.values

    def __hash__(self):
        return hash(self.values)


@dataclass(frozen=True, eq=False)
class MrsValuation:
    """Matroid-rank-sum valuation: sum of weighted rank functions over k channels."""

    k: int
    terms: tuple

    def __post_init__(self):
        if self.k < 0:
            raise DomainError("k must be nonnegative")
        terms = tuple((float(x), rank) for x, rank in self.terms)
        if any(x < 0 for x, _ in terms):
            raise DomainError("term weights must be nonnegative")
        object.__setattr__(self, "terms", terms)

    @cached_property
    def table(self) -> np.ndarray:
        """Values of all 2^k subsets, indexed by bitmask."""
        if self.k > LOTTERY_LIMIT:
            raise SizeError(f"subset tables limited to k <= {LOTTERY_LIMIT}")
        t = np.zeros(1 << self.k)
        for x, rank in self.terms:
            t += x * rank.rank_table(self.k)
        t.setflags(write=False)
        return t

    def full_value(self) -> float:
        return float(self.table[-1])

    def to_dict(self):
        return {"type": "mrs", "terms": [{"w": x, "rank": r.to_dict()}
                                         for x, r in self.terms]}

    def __eq__(self, other):
        return (isinstance(other, MrsValuation) and self.k == other.k
                and self.terms == other.terms)

    def __hash__(self):
        return hash((self.k, self.terms))


def valuation_from_dict(d, k):
    if d.get("type") == "symmetric":
        val = SymmetricValuation(tuple(d["values"]))
        if val.k != k:
            raise DomainError(f"symmetric valuation has {val.k} channels, expected {k}")
        return val
    if d.get("type") == "mrs":
        return MrsValuation(k, tuple((t["w"], rank_from_dict(t["rank"]))
                                     for t in d["terms"]))
    raise DomainError(f"unknown valuation type {d.get('type')!r}")


def value(val, channels, k=None) -> float:
    """Value of the channel subset ``channels``."""
    if isinstance(val, SymmetricValuation):
        k = val.k
        m = _mask(channels, k)
        return val.values[bin(m).count("1")]
    m = _mask(channels, val.k)
    return float(val.table[m])


def subset_probabilities(q) -> np.ndarray:
    """Probability of every bitmask under independent inclusion with marginals q."""
    probs = np.ones(1)
    for qj in q:
        # bit j set doubles the index range: new high half includes channel j
        probs = np.concatenate([probs * (1 - qj), probs * qj])
    return probs


def batch_subset_probabilities(Q) -> np.ndarray:
    """Row-wise ``subset_probabilities`` for an (n, k) array of marginals."""
    Q = np.asarray(Q, dtype=float)
    probs = np.ones((Q.shape[0], 1))
    for j in range(Q.shape[1]):
        qj = Q[:, j:j + 1]
        probs = np.concatenate([probs * (1 - qj), probs * qj], axis=1)
    return probs


def batch_lottery_values(tables, Q) -> np.ndarray:
    """Lottery values of n bidders at once; ``tables`` is (n, 2^k)."""
    return (batch_subset_probabilities(Q) * tables).sum(axis=1)


def batch_lottery_gradients(tables, Q) -> np.ndarray:
    """Row-wise ``lottery_gradient``; returns an (n, k) array."""
    Q = np.asarray(Q, dtype=float)
    n, k = Q.shape
    shape = (n,) + (2,) * k
    probs = batch_subset_probabilities(Q).reshape(shape)
    tab = np.asarray(tables, dtype=float).reshape(shape)
    grad = np.empty((n, k))
    for j in range(k):
        ax = k - j  # axis 0 is the bidder
        gain = np.take(tab, 1, axis=ax) - np.take(tab, 0, axis=ax)
        grad[:, j] = (probs.sum(axis=ax) * gain).reshape(n, -1).sum(axis=1)
    return grad


def _check_q(val, q):
    q = np.asarray(q, dtype=float)
    k = val.k
    if q.shape != (k,):
        raise DomainError(f"expected {k} probabilities, got shape {q.shape}")
    if k > LOTTERY_LIMIT:
        raise SizeError(f"lottery values limited to k <= {LOTTERY_LIMIT}")
    if np.any(q < 0) or np.any(q > 1):
        raise DomainError("probabilities must lie in [0, 1]")
    return q


def lottery_value(val, q) -> float:
    """Expected value of a random set with independent channel marginals ``q``."""
    q = _check_q(val, q)
    if isinstance(val, MrsValuation) and _uniform_only(val):
        return _uniform_lottery(val, q)
    return float(subset_probabilities(q) @ val.table)


def _uniform_only(val):
    return all(isinstance(r, Uniform) for _, r in val.terms)


def count_distribution(q) -> np.ndarray:
    """Poisson-binomial distribution of |T| (length k + 1)."""
    dist = np.zeros(len(q) + 1)
    dist[0] = 1.0
    for i, qj in enumerate(q):
        dist[1:i + 2] = dist[1:i + 2] * (1 - qj) + dist[:i + 1] * qj
        dist[0] *= 1 - qj
    return dist


def _uniform_lottery(val, q):
    dist = count_distribution(q)
    counts = np.arange(len(q) + 1)
    return float(sum(x * (dist @ np.minimum(counts, r.r)) for x, r in val.terms))


def _pinned(q, j, v):
    out = q.copy()
    out[j] = v
    return out


def lottery_gradient(val, q) -> np.ndarray:
    """Partial derivatives of the lottery value with respect to each marginal.

    The lottery value is multilinear in ``q``, so the derivative in ``q_j`` is
    the difference between pinning ``q_j`` to 1 and to 0.
    """
    q = _check_q(val, q)
    k = len(q)
    if k == 0:
        return np.zeros(0)
    if isinstance(val, MrsValuation) and _uniform_only(val):
        return _uniform_gradient(val, q)
    # axis k-1-j of the reshaped arrays is bit j of the mask
    probs = subset_probabilities(q).reshape((2,) * k)
    table = np.asarray(val.table, dtype=float).reshape((2,) * k)
    grad = np.empty(k)
    for j in range(k):
        ax = k - 1 - j
        marg = probs.sum(axis=ax)
        gain = np.take(table, 1, axis=ax) - np.take(table, 0, axis=ax)
        grad[j] = float((marg * gain).sum())
    return grad


def _uniform_gradient(val, q):
    # |T| over the other channels is Poisson-binomial; adding j raises min(|T|, r) iff |T| < r
    k = len(q)
    grad = np.empty(k)
    for j in range(k):
        dist = count_distribution(np.delete(q, j))
        grad[j] = sum(x * dist[:min(r.r, k)].sum() for x, r in val.terms)
    return grad


def lottery_hessian(val, q) -> np.ndarray:
    """Second derivatives in ``q``; the diagonal is zero by multilinearity."""
    q = _check_q(val, q)
    k = len(q)
    table = val.table
    idx = np.arange(1 << k)
    hess = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            bi, bj = 1 << i, 1 << j
            base = idx[(idx & (bi | bj)) == 0]
            rest = np.delete(q, [i, j])
            pr = subset_probabilities(rest)
            # base masks enumerate the other channels in increasing bit order
            second = (table[base | bi | bj] - table[base | bi]
                      - table[base | bj] + table[base])
            hess[i, j] = hess[j, i] = pr @ second
    return hess


def poisson_marginals(x, scale) -> np.ndarray:
    """Allocation probabilities 1 - exp(-x / scale) of the Poisson-style rounding."""
    return -np.expm1(-np.asarray(x, dtype=float) / scale)


def poisson_lottery_value(val, x, scale) -> float:
    """Lottery value as a function of fractional allocations x (concave for MRS)."""
    return lottery_value(val, poisson_marginals(x, scale))


def is_submodular_table(table, k, tol=1e-12) -> bool:
    """Check diminishing returns over every (T subset of T', j) triple."""
    for t in range(1 << k):
        for j in range(k):
            if t >> j & 1:
                continue
            gain = table[t | 1 << j] - table[t]
            # iterate supersets of t not containing j
            free = ((1 << k) - 1) & ~t & ~(1 << j)
            s = free
            while True:
                tp = t | s
                if table[tp | 1 << j] - table[tp] > gain + tol:
                    return False
                if s == 0:
                    break
                s = (s - 1) & free
    return True
