"""Packing LPs: construction, certified solving, feasibility checks, LP-format dump.

Every program here has the form ``max c.x  s.t.  A x <= b,  0 <= x <= u`` with
nonnegative ``A`` and ``b``.  Solutions carry a duality-gap certificate built
from a dual-feasible point, so the reported gap is a proof of near-optimality
rather than a solver status flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from specauction.errors import DomainError, SolverError
from specauction.graph import ConflictGraph

FEAS_TOL = 1e-9
BOX_TOL = 1e-12
DEFAULT_GAP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PackingLP:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    upper: np.ndarray
    shape: tuple
    row_names: tuple = ()
    var_names: tuple = ()

    @property
    def num_vars(self):
        return len(self.c)


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Primal point (reshaped to ``lp.shape``), objective and gap certificate."""

    x: np.ndarray
    objective_value: float
    gap_certificate: float
    dual: np.ndarray = field(repr=False)
    dual_bound: float = 0.0


def _packing(c, A, b, upper, shape, row_names=(), var_names=()):
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(c))
    b = np.asarray(b, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(A < 0) or np.any(b < 0):
        raise DomainError("packing LP needs nonnegative constraint data")
    return PackingLP(c, A, b, upper, tuple(shape), tuple(row_names), tuple(var_names))


def _positions(order, n):
    pos = np.empty(n, dtype=int)
    pos[list(order)] = np.arange(n)
    return pos


def build_count_lp(g: ConflictGraph, order, rho: float, k: int, values) -> PackingLP:
    """Count-form relaxation with objective ``values[v, i-1]`` on ``x[v, i]``."""
    n = g.n
    values = np.asarray(values, dtype=float).reshape(n, k)
    pos = _positions(order, n)
    wb = g.wbar
    counts = np.arange(1, k + 1)
    A = np.zeros((2 * n, n * k))
    for v in range(n):
        for u in range(n):
            if pos[u] < pos[v] and wb[u, v] > 0:
                A[v, u * k:(u + 1) * k] = counts * wb[u, v]
        A[n + v, v * k:(v + 1) * k] = 1.0
    b = np.concatenate([np.full(n, rho * k), np.ones(n)])
    rows = [f"interference_{v}" for v in range(n)] + [f"one_count_{v}" for v in range(n)]
    names = [f"x_{v}_{i}" for v in range(n) for i in range(1, k + 1)]
    return _packing(values.ravel(), A, b, np.ones(n * k), (n, k), rows, names)


def build_symmetric_lp(instance, order=None, rho=None) -> PackingLP:
    """LP relaxation over 'user v gets exactly i channels' variables."""
    instance.require("symmetric")
    order = instance.ordering.order if order is None else order
    rho = instance.rho if rho is None else rho
    values = np.array([[val.values[i] for i in range(1, instance.k + 1)]
                       for val in instance.valuations])
    return build_count_lp(instance.graph, order, rho, instance.k, values)


def build_single_channel_lp(g: ConflictGraph, order, rho: float, a) -> PackingLP:
    """``max a.x`` over the per-channel interference constraints and the unit box."""
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise DomainError("single-channel weights must be nonnegative")
    n = g.n
    pos = _positions(order, n)
    earlier = pos[:, None] < pos[None, :]
    A = np.where(earlier, g.wbar, 0.0).T
    rows = [f"interference_{v}" for v in range(n)]
    names = [f"x_{v}" for v in range(n)]
    return _packing(a, A, np.full(n, float(rho)), np.ones(n), (n,), rows, names)


def build_channel_polytope(g: ConflictGraph, order, rho: float, k: int):
    """Constraint matrix of the multi-channel polytope, variables ``x[v, j]``.

    Returns ``(A, b)`` with rows indexed ``(v, j)``; the box is implicit.
    """
    n = g.n
    pos = _positions(order, n)
    earlier = pos[:, None] < pos[None, :]
    single = np.where(earlier, g.wbar, 0.0).T
    A = np.zeros((n * k, n * k))
    for j in range(k):
        # row v*k + j sums column u*k + j
        A[j::k, j::k] = single
    return A, np.full(n * k, float(rho))


def build_channel_lp(g: ConflictGraph, order, rho: float, k: int, c) -> PackingLP:
    """``max c.x`` over the multi-channel polytope and the unit box (c >= 0, length n*k)."""
    c = np.asarray(c, dtype=float).ravel()
    if np.any(c < 0):
        raise DomainError("channel weights must be nonnegative")
    A, b = build_channel_polytope(g, order, rho, k)
    n = g.n
    return _packing(c, A, b, np.ones(n * k), (n, k))


def _certificate(lp: PackingLP, x, y):
    y = np.maximum(y, 0.0)
    z = np.maximum(lp.c - lp.A.T @ y, 0.0)
    dual_bound = float(lp.b @ y + lp.upper @ z)
    primal = float(lp.c @ x)
    return primal, dual_bound, y


def _repair(lp: PackingLP, x):
    """Clip to the box and shrink rows that overshoot (packing: shrinking is safe)."""
    x = np.clip(x, 0.0, lp.upper)
    for _ in range(5):
        ax = lp.A @ x
        over = ax > lp.b
        if not np.any(over):
            break
        for r in np.nonzero(over)[0]:
            row = lp.A[r]
            if lp.b[r] <= 0:
                x[row > 0] = 0.0
            else:
                x[row > 0] *= lp.b[r] / ax[r]
    return x


def _polish(lp: PackingLP, x, y):
    """Re-solve the active equality system of a vertex for full precision."""
    slack = lp.b - lp.A @ x
    tight_rows = np.nonzero(np.abs(slack) <= 1e-7 * np.maximum(1.0, lp.b))[0]
    at_zero = x <= 1e-9
    at_upper = x >= lp.upper - 1e-9
    free = ~(at_zero | at_upper)
    if not np.any(free):
        xp = np.where(at_upper, lp.upper, 0.0)
    else:
        rhs = lp.b[tight_rows] - lp.A[np.ix_(tight_rows, at_upper)] @ lp.upper[at_upper]
        sub = lp.A[np.ix_(tight_rows, free)]
        xp = np.where(at_upper, lp.upper, 0.0)
        if len(tight_rows):
            sol, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
            if np.allclose(sub @ sol, rhs, atol=1e-9) and np.all(np.abs(sol - x[free]) < 1e-6):
                xp[free] = sol
            else:
                xp[free] = x[free]
        else:
            xp[free] = x[free]
    xp = _repair(lp, xp)
    # duals: reduced costs vanish on free variables, rows off the tight set get 0
    yp = np.zeros_like(y)
    if len(tight_rows) and np.any(free):
        sub = lp.A[np.ix_(tight_rows, free)].T
        sol, *_ = np.linalg.lstsq(sub, lp.c[free], rcond=None)
        if np.all(sol >= -1e-9) and np.all(np.abs(sol - y[tight_rows]) < 1e-6):
            yp[tight_rows] = sol
        else:
            yp = y
    else:
        yp = y
    return xp, yp


def solve_packing_lp(lp: PackingLP, tol: float = DEFAULT_GAP_TOL) -> LpSolution:
    """Solve with HiGHS dual simplex and certify the gap with an explicit dual point.

    ``tol`` bounds the gap relative to ``max(1, |objective|)``.
    """
    if lp.num_vars == 0:
        return LpSolution(np.zeros(lp.shape), 0.0, 0.0, np.zeros(len(lp.b)))
    if not np.any(lp.c > 0):
        # x = 0 is optimal and y = 0 is a matching dual
        x = np.zeros(lp.num_vars)
        return LpSolution(x.reshape(lp.shape), 0.0, 0.0, np.zeros(len(lp.b)))
    res = linprog(
        -lp.c,
        A_ub=lp.A if len(lp.b) else None,
        b_ub=lp.b if len(lp.b) else None,
        bounds=list(zip(np.zeros(lp.num_vars), lp.upper)),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0 or res.x is None:
        raise SolverError("LP solve failed", {"status": res.status, "message": res.message})
    x = _repair(lp, np.asarray(res.x, dtype=float))
    y = -np.asarray(res.ineqlin.marginals, dtype=float) if len(lp.b) else np.zeros(0)
    primal, bound, y = _certificate(lp, x, y)
    scale = max(1.0, abs(primal))
    if bound - primal > tol * scale:
        xp, yp = _polish(lp, x, y)
        p2, b2, y2 = _certificate(lp, xp, yp)
        if b2 - p2 < bound - primal:
            x, primal, bound, y = xp, p2, b2, y2
    gap = max(0.0, bound - primal)
    if gap > tol * scale:
        raise SolverError(
            "LP gap certificate above tolerance",
            {"gap": gap, "tol": tol, "objective": primal},
        )
    return LpSolution(x.reshape(lp.shape), primal, gap, y, bound)


def check_lp_feasible(lp: PackingLP, point, tol: float = FEAS_TOL):
    """Return ``(feasible, worst_violation)`` for a candidate point."""
    x = np.asarray(point, dtype=float)
    if x.size != lp.num_vars:
        raise DomainError(f"point has {x.size} entries, LP has {lp.num_vars} variables")
    x = x.ravel()
    viol = 0.0
    if len(lp.b):
        viol = max(viol, float(np.max(lp.A @ x - lp.b)))
    viol = max(viol, float(np.max(-x)), float(np.max(x - lp.upper)))
    viol = max(viol, 0.0)
    return viol <= tol, viol


def _fmt(x):
    return repr(float(x))


def to_lp_format(lp: PackingLP, name="packing") -> str:
    """CPLEX LP text form, for cross-checking with external solvers."""
    names = lp.var_names or tuple(f"x{i}" for i in range(lp.num_vars))
    rows = lp.row_names or tuple(f"r{i}" for i in range(len(lp.b)))

    def linear(coefs):
        terms = [f"{_fmt(c)} {names[i]}" for i, c in enumerate(coefs) if c != 0]
        return " + ".join(terms) if terms else f"0 {names[0]}"

    lines = [f"\\ {name}", "Maximize", f" obj: {linear(lp.c)}", "Subject To"]
    for r, row in enumerate(lp.A):
        if np.any(row != 0):
            lines.append(f" {rows[r]}: {linear(row)} <= {_fmt(lp.b[r])}")
    lines.append("Bounds")
    for i, u in enumerate(lp.upper):
        lines.append(f" 0 <= {names[i]} <= {_fmt(u)}")
    lines.append("End")
    return "\n".join(lines) + "\n"
