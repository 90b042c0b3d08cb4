"""Auction instances, allocations, and their JSON forms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from specauction.errors import DomainError, ModeError
from specauction.graph import (
    ConflictGraph,
    Ordering,
    graph_from_dict,
    graph_to_dict,
    incoming_weights,
    is_independent,
)
from specauction.valuations import (
    MrsValuation,
    SymmetricValuation,
    valuation_from_dict,
    value,
)


@dataclass(frozen=True)
class Allocation:
    """Channel sets per user; ``sets[v]`` is a frozenset of channel indices."""

    sets: tuple

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(frozenset(int(j) for j in s)
                                               for s in self.sets))

    @classmethod
    def empty(cls, n):
        return cls(tuple(frozenset() for _ in range(n)))

    @property
    def n(self):
        return len(self.sets)

    def channel_users(self, j) -> list[int]:
        return [v for v, s in enumerate(self.sets) if j in s]

    def counts(self) -> list[int]:
        return [len(s) for s in self.sets]

    def used_channels(self):
        return sorted(set().union(*self.sets)) if self.sets else []

    def is_feasible(self, g: ConflictGraph) -> bool:
        return not self.violations(g)

    def violations(self, g: ConflictGraph) -> list[int]:
        """Channels whose user set is not independent."""
        return [j for j in self.used_channels()
                if not is_independent(g, self.channel_users(j))]

    def max_incoming(self, g: ConflictGraph, symmetric=False) -> float:
        """Largest per-channel incoming weight at any allocated user."""
        worst = 0.0
        w = g.wbar if symmetric else g.w
        for j in self.used_channels():
            users = self.channel_users(j)
            if len(users) > 1:
                sub = w[np.ix_(users, users)]
                worst = max(worst, float(sub.sum(axis=0).max()))
        return worst

    def welfare(self, instance: "Instance") -> float:
        return float(sum(value(val, s) for val, s in zip(instance.valuations, self.sets)))

    def to_dict(self):
        return {"sets": [sorted(s) for s in self.sets]}


@dataclass(frozen=True, eq=False)
class Instance:
    """Conflict graph, ordering with rho bound, k channels, one valuation per user."""

    graph: ConflictGraph
    ordering: Ordering
    k: int
    valuations: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = tuple(self.valuations)
        if len(vals) != self.graph.n:
            raise DomainError("need one valuation per user")
        if len(self.ordering.order) != self.graph.n:
            raise DomainError("ordering size does not match the graph")
        if self.k < 1:
            raise DomainError("need at least one channel")
        for val in vals:
            if val.k != self.k:
                raise DomainError("valuation channel count differs from k")
        object.__setattr__(self, "valuations", vals)

    @property
    def n(self):
        return self.graph.n

    @property
    def rho(self):
        return self.ordering.rho

    @property
    def kind(self) -> str:
        if all(isinstance(v, SymmetricValuation) for v in self.valuations):
            return "symmetric"
        if all(isinstance(v, MrsValuation) for v in self.valuations):
            return "mrs"
        return "mixed"

    def require(self, kind):
        if self.kind != kind:
            raise ModeError(f"operation needs {kind} valuations, instance is {self.kind}")

    def with_valuations(self, valuations) -> "Instance":
        return Instance(self.graph, self.ordering, self.k, tuple(valuations), dict(self.meta))

    def replace_valuation(self, v, val) -> "Instance":
        vals = list(self.valuations)
        vals[v] = val
        return self.with_valuations(vals)

    def full_values(self) -> np.ndarray:
        return np.array([val.full_value() for val in self.valuations])

    def to_dict(self):
        out = {
            "graph": graph_to_dict(self.graph, self.ordering),
            "k": self.k,
            "valuations": [val.to_dict() for val in self.valuations],
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        g, ordering = graph_from_dict(data["graph"])
        if ordering is None:
            raise DomainError("instance graph must carry 'pi' and 'rho'")
        k = int(data["k"])
        vals = tuple(valuation_from_dict(v, k) for v in data["valuations"])
        return cls(g, ordering, k, vals, dict(data.get("meta", {})))

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


__all__ = ["Allocation", "Instance", "incoming_weights"]
