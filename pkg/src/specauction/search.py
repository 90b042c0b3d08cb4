"""Exhaustive search over feasible allocations (exact oracle for small instances)."""

from __future__ import annotations

import itertools

import numpy as np

from specauction.graph import is_independent
from specauction.instance import Allocation


def best_allocation(g, k, value_fn):
    """Exhaustive search for ``max sum_v value_fn(v, T_v)`` over feasible allocations.

    Users are branched in order of their best possible value; every channel's
    user set must stay independent.  Returns an ``Allocation``.
    """
    n = g.n
    subsets = [frozenset(c) for r in range(k + 1) for c in itertools.combinations(range(k), r)]
    options = []
    for v in range(n):
        opts = [(float(value_fn(v, s)), s) for s in subsets if s]
        opts = [o for o in opts if o[0] > 0]
        opts.sort(key=lambda o: (-o[0], sorted(o[1])))
        options.append(opts)
    users = sorted(range(n), key=lambda v: -(options[v][0][0] if options[v] else 0.0))
    best_v = [options[v][0][0] if options[v] else 0.0 for v in users]
    suffix = np.concatenate([np.cumsum(best_v[::-1])[::-1], [0.0]])
    cache: dict = {}

    def independent(mask):
        if mask not in cache:
            cache[mask] = is_independent(g, [u for u in range(n) if mask >> u & 1])
        return cache[mask]

    channel_masks = [0] * k
    sets = [frozenset()] * n
    best = [0.0, tuple(sets)]

    def dfs(i, total):
        if total > best[0]:
            best[0], best[1] = total, tuple(sets)
        if i == len(users) or total + suffix[i] <= best[0]:
            return
        v = users[i]
        for val, s in options[v]:
            if total + val + suffix[i + 1] <= best[0]:
                break
            if all(independent(channel_masks[j] | 1 << v) for j in s):
                for j in s:
                    channel_masks[j] |= 1 << v
                sets[v] = s
                dfs(i + 1, total + val)
                sets[v] = frozenset()
                for j in s:
                    channel_masks[j] &= ~(1 << v)
        dfs(i + 1, total)

    dfs(0, 0.0)
    return Allocation(best[1])
