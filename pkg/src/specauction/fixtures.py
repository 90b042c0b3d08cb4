"""Bundled example instances."""

from __future__ import annotations

import json
from fractions import Fraction
from importlib import resources

from specauction.graph import ConflictGraph, Ordering, rho_of_ordering


def greedy_example():
    """The seven-user greedy example: graph, ordering and both bid variants.

    Bids are ``Fraction`` objects so the greedy algorithms run in exact
    arithmetic.  Returns ``(graph, ordering, data)`` where ``data`` is the
    parsed fixture with bids and residuals converted to fractions.
    """
    text = resources.files("specauction").joinpath("data/greedy_example.json").read_text()
    data = json.loads(text)
    g = ConflictGraph.from_undirected(data["n"], [tuple(e) for e in data["edges"]])
    pi = tuple(data["pi"])
    order = Ordering(pi, rho_of_ordering(g, pi), verified=True)
    for var in data["variants"].values():
        var["bids"] = [Fraction(b) for b in var["bids"]]
        var["residuals"] = {int(v): Fraction(r) for v, r in var["residuals"].items()}
        if "monotone_greedy_welfare" in var:
            var["monotone_greedy_welfare"] = Fraction(var["monotone_greedy_welfare"])
    data["probe_grid"] = [Fraction(b) for b in data["probe_grid"]]
    return g, order, data
