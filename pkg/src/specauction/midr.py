"""Maximal-in-distributional-range allocation for matroid-rank-sum bidders.

Pipeline: maximize the concave expected welfare over the per-channel
interference polytope, then round the optimum so that user v receives channel
j with probability exactly ``1 - exp(-x[v, j] / (2 alpha))``, independently
across channels.  Rounding goes through a per-channel decomposition of the
scaled point followed by independent retention.  ``simulate_midr`` reaches
the same law using only increasingly accurate estimates of the optimum, and
``perturb_midr`` mixes in a tiny-probability lottery over single users.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from specauction.decomposition import Decomposition, decompose_channel, default_alpha
from specauction.errors import (DecompositionError, DomainError, OptimizationError,
                                SimulationError)
from specauction.instance import Allocation
from specauction.lp import build_channel_lp, build_channel_polytope, solve_packing_lp
from specauction.rng import PHASE_PERTURB, PHASE_PICK, PHASE_RETAIN, as_seed, keyed
from specauction.valuations import (batch_lottery_gradients, batch_lottery_values,
                                    lottery_gradient, lottery_hessian, lottery_value)

DEFAULT_TOL_GAP = 1e-9
MAX_LEVEL = 64
ACTIVE_TOL = 1e-8
# polish even below tolerance so payments see a near-exact optimum
POLISH_BELOW = 1e-3


def default_mu(n, k) -> float:
    """min(2^-nk, 2^-40), never below the smallest normal double."""
    return max(min(2.0 ** -(n * k), 2.0 ** -40), np.finfo(float).tiny)


@dataclass(frozen=True)
class MidrConfig:
    alpha: float
    mu: float | None = None
    tol_gap: float = DEFAULT_TOL_GAP
    max_newton: int = 60
    oracle: str | None = None

    def __post_init__(self):
        if self.alpha < 1:
            raise DomainError("alpha must be at least 1")
        if self.mu is not None and not 0 <= self.mu < 1:
            raise DomainError("mu must lie in [0, 1)")
        if self.tol_gap <= 0:
            raise DomainError("tol_gap must be positive")

    def mu_for(self, n, k) -> float:
        return default_mu(n, k) if self.mu is None else self.mu

    @classmethod
    def for_instance(cls, instance, **kw):
        return cls(alpha=default_alpha(instance.graph, instance.rho), **kw)


@dataclass(frozen=True, eq=False)
class MidrSolution:
    x: np.ndarray
    objective_value: float
    gap: float
    alpha: float
    mu: float
    diagnostics: dict = field(default_factory=dict)


def _marginals(x, alpha):
    return -np.expm1(-np.asarray(x, dtype=float) / (2 * alpha))


def expected_welfare(instance, x, alpha) -> float:
    """Sum of lottery values under the rounding marginals of ``x``."""
    instance.require("mrs")
    q = _marginals(np.asarray(x, dtype=float).reshape(instance.n, instance.k), alpha)
    return float(sum(lottery_value(val, q[v]) for v, val in enumerate(instance.valuations)))


class PerturbedObjective:
    """Expected welfare of the full pipeline (rounding plus perturbation).

    ``include`` masks bidders out; dropping one gives the welfare of the
    others used by VCG payments.  The perturbation
    term keeps the full-set value sum of the included bidders, but the
    normaliser ``n^2 k`` always uses the instance's n.
    """

    def __init__(self, instance, alpha, mu, include=None):
        instance.require("mrs")
        self.instance = instance
        self.n, self.k = instance.n, instance.k
        self.alpha = float(alpha)
        self.mu = float(mu)
        self.include = (np.ones(self.n, dtype=bool) if include is None
                        else np.asarray(include, dtype=bool))
        full = instance.full_values()
        self.pert = self.mu * float(full[self.include].sum()) / (self.n ** 2 * self.k)
        # excluded bidders get an all-zero table
        self.tables = np.zeros((self.n, 1 << self.k))
        for v in np.nonzero(self.include)[0]:
            self.tables[v] = instance.valuations[v].table

    def _q(self, x):
        x = np.asarray(x, dtype=float).reshape(self.n, self.k)
        e = np.exp(-x / (2 * self.alpha))
        return 1 - e, e

    def per_user(self, x) -> np.ndarray:
        """Expected value of each included bidder (zero for excluded)."""
        q, _ = self._q(x)
        full = self.instance.full_values()
        scale = self.mu * q.sum() / (self.n ** 2 * self.k)
        out = (1 - self.mu) * batch_lottery_values(self.tables, q) + scale * full
        return np.where(self.include, out, 0.0)

    def value(self, x) -> float:
        q, _ = self._q(x)
        lot = batch_lottery_values(self.tables, q).sum()
        return float((1 - self.mu) * lot + self.pert * q.sum())

    def gradient(self, x) -> np.ndarray:
        q, e = self._q(x)
        dq = e / (2 * self.alpha)
        g = self.pert + (1 - self.mu) * batch_lottery_gradients(self.tables, q)
        return (g * dq).ravel()

    def hessian(self, x) -> np.ndarray:
        q, e = self._q(x)
        a = self.alpha
        dq = e / (2 * a)
        d2q = -e / (4 * a * a)
        n, k = self.n, self.k
        H = np.zeros((n * k, n * k))
        vals = self.instance.valuations
        for v in range(n):
            gq = np.full(k, self.pert)
            block = np.zeros((k, k))
            if self.include[v]:
                gq = gq + (1 - self.mu) * lottery_gradient(vals[v], q[v])
                block = (1 - self.mu) * lottery_hessian(vals[v], q[v])
            block = block * np.outer(dq[v], dq[v]) + np.diag(gq * d2q[v])
            H[v * k:(v + 1) * k, v * k:(v + 1) * k] = block
        return H


def frank_wolfe_gap(instance, grad, x) -> float:
    """max over the polytope of grad.(s - x); bounds the suboptimality of x."""
    g = np.asarray(grad, dtype=float).ravel()
    sol = solve_packing_lp(build_channel_lp(instance.graph, instance.ordering.order,
                                            instance.rho, instance.k, np.maximum(g, 0.0)))
    best = sol.objective_value + sol.gap_certificate
    return float(best - g @ np.asarray(x, dtype=float).ravel())


def _face_step(obj, A, b, x, lo, hi, rows):
    """Newton step on the face fixed by (lo, hi, rows); returns (dx, row multipliers)."""
    free = ~(lo | hi)
    g = obj.gradient(x)
    H = obj.hessian(x)
    Ar = A[rows]
    nf, nr = int(free.sum()), len(rows)
    K = np.zeros((nf + nr, nf + nr))
    K[:nf, :nf] = H[np.ix_(free, free)]
    K[:nf, nf:] = Ar[:, free].T
    K[nf:, :nf] = Ar[:, free]
    rhs = np.concatenate([-g[free], b[rows] - Ar @ x])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    dx = np.zeros_like(x)
    dx[free] = sol[:nf]
    return dx, -sol[nf:]


def _max_step(A, b, x, dx, rows_mask):
    """Largest t in [0, 1] keeping inactive rows and the box satisfied."""
    t = 1.0
    Ad = A @ dx
    slack = b - A @ x
    sel = (~rows_mask) & (Ad > 1e-15)
    if np.any(sel):
        t = min(t, float(np.min(np.maximum(slack[sel], 0.0) / Ad[sel])))
    up = dx > 1e-15
    if np.any(up):
        t = min(t, float(np.min((1 - x[up]) / dx[up])))
    dn = dx < -1e-15
    if np.any(dn):
        t = min(t, float(np.min(x[dn] / -dx[dn])))
    return max(t, 0.0)


def _active_set_polish(obj, A, b, x, max_iter):
    """Primal active-set Newton method starting from an approximate optimum."""
    x = np.clip(x, 0.0, 1.0)
    slack = b - A @ x
    rows_mask = slack <= ACTIVE_TOL * np.maximum(1.0, b)
    lo = x <= ACTIVE_TOL
    hi = x >= 1 - ACTIVE_TOL
    lo &= ~hi
    x[lo], x[hi] = 0.0, 1.0
    for _ in range(max_iter):
        rows = np.nonzero(rows_mask)[0]
        dx, lam = _face_step(obj, A, b, x, lo, hi, rows)
        t = _max_step(A, b, x, dx, rows_mask)
        f0 = obj.value(x)
        if t > 0:
            xn = np.clip(x + t * dx, 0.0, 1.0)
            while obj.value(xn) < f0 - 1e-15 * max(1.0, abs(f0)) and t > 1e-12:
                t /= 2
                xn = np.clip(x + t * dx, 0.0, 1.0)
            if obj.value(xn) >= f0 - 1e-15 * max(1.0, abs(f0)):
                x = xn
        if t < 1.0:
            # block by the first constraint reached
            slack = b - A @ x
            rows_mask |= slack <= 1e-13 * np.maximum(1.0, b)
            lo |= (x <= 1e-15) & ~hi
            hi |= (x >= 1 - 1e-15) & ~lo
            if t > 0:
                continue
        # full step taken (or no progress): check signs of multipliers
        g = obj.gradient(x)
        free = ~(lo | hi)
        Ar = A[rows]
        if len(rows) and np.any(free):
            lam, *_ = np.linalg.lstsq(Ar[:, free].T, g[free], rcond=None)
        else:
            lam = np.zeros(len(rows))
        reduced = g - Ar.T @ lam if len(rows) else g.copy()
        viol_row = (np.argmin(lam), lam.min()) if len(rows) else (None, 0.0)
        bad_lo = np.where(lo, reduced, -np.inf)
        bad_hi = np.where(hi, -reduced, -np.inf)
        cands = [(-viol_row[1], "row", viol_row[0]),
                 (bad_lo.max(initial=-np.inf), "lo", int(np.argmax(bad_lo))),
                 (bad_hi.max(initial=-np.inf), "hi", int(np.argmax(bad_hi)))]
        worst = max(cands, key=lambda c: c[0])
        if worst[0] <= 1e-14 and np.linalg.norm(dx) < 1e-13:
            break
        if worst[0] > 1e-14:
            kind, i = worst[1], worst[2]
            if kind == "row":
                rows_mask[rows[i]] = False
            elif kind == "lo":
                lo[i] = False
            else:
                hi[i] = False
    return x


def _feasible_start(A, b, nvar):
    x = np.full(nvar, 0.5)
    s = A @ x
    pos = s > 0
    if np.any(pos):
        x *= min(1.0, float(np.min(b[pos] / s[pos])))
    return x


def maximize_expected_welfare(instance, alpha=None, config=None, include=None) -> MidrSolution:
    """Maximize the perturbed expected welfare and certify the Frank-Wolfe gap.

    ``include`` restricts the objective to a subset of bidders (VCG payments).
    """
    instance.require("mrs")
    if config is None:
        config = MidrConfig(alpha=alpha if alpha is not None
                            else default_alpha(instance.graph, instance.rho))
    alpha = config.alpha if alpha is None else alpha
    n, k = instance.n, instance.k
    mu = config.mu_for(n, k)
    obj = PerturbedObjective(instance, alpha, mu, include)
    A, b = build_channel_polytope(instance.graph, instance.ordering.order, instance.rho, k)
    if not np.any(obj.include & (instance.full_values() > 0)):
        x = np.zeros(n * k)
        return MidrSolution(x.reshape(n, k), 0.0, 0.0, alpha, mu, {"trivial": True})
    x0 = _feasible_start(A, b, n * k)
    res = minimize(lambda z: -obj.value(z), x0, jac=lambda z: -obj.gradient(z),
                   method="SLSQP", bounds=[(0.0, 1.0)] * (n * k),
                   constraints=[{"type": "ineq", "fun": lambda z: b - A @ z,
                                 "jac": lambda z: -A}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    x = np.clip(res.x, 0.0, 1.0)
    x = _repair(A, b, x)
    gap0 = frank_wolfe_gap(instance, obj.gradient(x), x)
    best_x, best_gap = x, gap0
    if best_gap > POLISH_BELOW * config.tol_gap:
        xp = _repair(A, b, _active_set_polish(obj, A, b, x.copy(), config.max_newton))
        gp = frank_wolfe_gap(instance, obj.gradient(xp), xp)
        if gp < best_gap:
            best_x, best_gap = xp, gp
    if best_gap > config.tol_gap:
        raise OptimizationError(
            f"Frank-Wolfe gap {best_gap:.3g} above tolerance {config.tol_gap:.3g}",
            gap=best_gap)
    return MidrSolution(best_x.reshape(n, k), obj.value(best_x), max(best_gap, 0.0),
                        alpha, mu, {"slsqp_gap": gap0, "slsqp_status": int(res.status)})


def _repair(A, b, x):
    """Shrink rows that overshoot by rounding noise (the polytope is downward closed)."""
    x = np.clip(x, 0.0, 1.0)
    s = A @ x
    over = s > b
    if np.any(over):
        for r in np.nonzero(over)[0]:
            row = A[r] > 0
            x[row] *= b[r] / s[r]
    return x


# ---------------------------------------------------------------- rounding


@dataclass(frozen=True, eq=False)
class _ChannelTable:
    """Sampling table for one channel: entry membership and cumulative weights."""

    members: np.ndarray  # (entries, n) bool
    cum: np.ndarray

    @classmethod
    def from_decomposition(cls, dec: Decomposition, n, mass=1.0):
        members = np.zeros((len(dec.entries), n), dtype=bool)
        for i, (_, s) in enumerate(dec.entries):
            members[i, list(s)] = True
        cum = np.cumsum(dec.weights) * mass
        return cls(members, cum)

    def pick(self, u):
        idx = np.searchsorted(self.cum, u, side="right")
        return self.members[np.minimum(idx, len(self.cum) - 1)]


class RoundingPlan:
    """Decompositions and retention probabilities for exact rounding of ``x``.

    ``sample_batch`` draws many independent roundings at once; a single
    rounding is the batch of size one, so both paths share one implementation.
    """

    def __init__(self, instance, x, alpha, oracle=None, seed=0):
        self.instance = instance
        n, k = instance.n, instance.k
        self.x = np.clip(np.asarray(x, dtype=float).reshape(n, k), 0.0, None)
        self.alpha = float(alpha)
        self.tables = []
        self.decompositions = []
        for j in range(k):
            dec = decompose_channel(instance.graph, instance.ordering.order, instance.rho,
                                    self.x[:, j], alpha_start=alpha, oracle=oracle, seed=seed)
            if dec.alpha_achieved > alpha * (1 + 1e-12):
                raise DecompositionError(
                    f"channel {j} needs alpha {dec.alpha_achieved:g} > {alpha:g}")
            self.decompositions.append(dec)
            self.tables.append(_ChannelTable.from_decomposition(dec, n))
        with np.errstate(divide="ignore", invalid="ignore"):
            keep = -np.expm1(-self.x / (2 * alpha)) / (self.x / alpha)
        self.retain = np.where(self.x > 0, np.minimum(keep, 1.0), 0.0)

    def targets(self):
        return _marginals(self.x, self.alpha)

    def sample_batch(self, rng, runs) -> np.ndarray:
        """Boolean array (runs, n, k) of allocated (user, channel) pairs."""
        seed = as_seed(rng)
        n, k = self.instance.n, self.instance.k
        out = np.zeros((runs, n, k), dtype=bool)
        for j in range(k):
            u = keyed(seed, PHASE_PICK, j).random(runs)
            tent = self.tables[j].pick(u)
            keep = keyed(seed, PHASE_RETAIN, j).random((runs, n)) < self.retain[:, j]
            out[:, :, j] = tent & keep
        return out

    def sample(self, rng) -> Allocation:
        return _to_allocation(self.sample_batch(rng, 1)[0])


def _to_allocation(mask) -> Allocation:
    return Allocation(tuple(frozenset(np.nonzero(row)[0].tolist()) for row in mask))


def round_exact(instance, x, alpha, rng, plan=None) -> Allocation:
    """Decompose each channel at ``alpha``, sample, retain v w.p. (1-e^{-x/2a})/(x/a)."""
    plan = plan or RoundingPlan(instance, x, alpha)
    return plan.sample(rng)


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True, eq=False)
class DyadicEstimate:
    level: int
    delta: float
    x_t: np.ndarray
    y_t: np.ndarray


def level_delta(n, t) -> float:
    return 1.0 / (n * 2.0 ** (t + 1))


class DeltaEstimator:
    """Estimates of the optimum with max-norm error at most 1/(n 2^(t+1)).

    The default returns one certified optimum for every level.  The
    accuracy implied by the perturbation's strong concavity is recorded in
    ``diagnostics``; at practical mu it is far weaker than the solver's real
    precision, so the contract rests on the solver's vertex-polished output.
    ``noise`` adds a uniform error of up to ``noise * delta`` per level to
    exercise the monotone-envelope logic.
    """

    def __init__(self, instance, config=None, solution=None, noise=0.0, seed=0):
        self.instance = instance
        self.config = config or MidrConfig.for_instance(instance)
        self.solution = solution or maximize_expected_welfare(instance, config=self.config)
        self.noise = float(noise)
        self.seed = seed
        a = self.config.alpha
        n, k = instance.n, instance.k
        mu = self.solution.mu
        pert = mu * float(instance.full_values().sum()) / (n * n * k)
        curv = pert * math.exp(-1 / (2 * a)) / (4 * a * a)
        bound = math.sqrt(2 * self.solution.gap / curv) if curv > 0 else math.inf
        self.diagnostics = {"gap": self.solution.gap, "strong_concavity": curv,
                            "implied_max_error": bound}

    @property
    def x_star(self):
        return self.solution.x

    def __call__(self, t) -> np.ndarray:
        x = self.solution.x
        if self.noise == 0:
            return x
        d = level_delta(self.instance.n, t)
        e = keyed(self.seed, PHASE_PICK, 10_000 + t).uniform(-1, 1, x.shape)
        return x + self.noise * d * e


class SimulationPlan:
    """Lazily built levels of the dyadic simulation for all channels."""

    def __init__(self, instance, alpha, estimator, oracle=None, seed=0):
        self.instance = instance
        self.alpha = float(alpha)
        self.estimator = estimator
        self.oracle = oracle
        self.seed = seed
        n, k = instance.n, instance.k
        self.levels: list[DyadicEstimate] = []
        self._y = [np.zeros((n, k))]
        self._level1 = None
        self._retention: dict = {}
        self._singleton: dict = {}

    def y(self, t) -> np.ndarray:
        n = self.instance.n
        while len(self._y) <= t:
            s = len(self._y)
            xt = np.asarray(self.estimator(s), dtype=float).reshape(self._y[0].shape)
            d = level_delta(n, s)
            yt = np.maximum(self._y[-1], np.maximum(xt - d, 0.0))
            if np.any(yt < self._y[-1]):
                raise SimulationError(f"envelope decreased at level {s}")
            self._y.append(yt)
            self.levels.append(DyadicEstimate(s, d, xt, yt))
        return self._y[t]

    def level1_tables(self):
        if self._level1 is None:
            y1 = self.y(1)
            inst = self.instance
            tabs = []
            for j in range(inst.k):
                dec = decompose_channel(inst.graph, inst.ordering.order, inst.rho, y1[:, j],
                                        alpha_start=self.alpha, oracle=self.oracle,
                                        seed=self.seed)
                if dec.alpha_achieved > self.alpha * (1 + 1e-12):
                    raise DecompositionError(
                        f"channel {j} needs alpha {dec.alpha_achieved:g} > {self.alpha:g}")
                tabs.append(_ChannelTable.from_decomposition(dec, inst.n, mass=0.5))
            self._level1 = tabs
        return self._level1

    def retention(self, t) -> np.ndarray:
        if t not in self._retention:
            a = self.alpha
            lo, hi = self.y(t - 1), self.y(t)
            inc = hi - lo
            with np.errstate(divide="ignore", invalid="ignore"):
                p = 2 * a * (np.exp(-lo / (2 * a)) - np.exp(-hi / (2 * a))) / inc
            # zero increment: the user carries no mass at this level
            self._retention[t] = np.where(inc > 0, np.minimum(p, 1.0), 0.0)
        return self._retention[t]

    def singleton_mass(self, t) -> np.ndarray:
        """Per-(user, channel) selection mass at level t >= 2."""
        if t not in self._singleton:
            m = (self.y(t) - self.y(t - 1)) / (2 * self.alpha)
            tot = m.sum(axis=0)
            if np.any(tot > 2.0 ** -t * (1 + 1e-9)):
                raise SimulationError(f"level {t} increments exceed mass 2^-{t}")
            self._singleton[t] = m
        return self._singleton[t]

    def sample_batch(self, rng, runs) -> np.ndarray:
        seed = as_seed(rng)
        inst = self.instance
        n, k = inst.n, inst.k
        out = np.zeros((runs, n, k), dtype=bool)
        for j in range(k):
            p = keyed(seed, PHASE_PICK, j).random(runs)
            keep_u = keyed(seed, PHASE_RETAIN, j).random((runs, n))
            r = dyadic_level(p)
            for t in np.unique(r):
                sel = np.nonzero(r == t)[0]
                u = p[sel] - (1 - 2.0 ** (-int(t) + 1))
                if t == 1:
                    tent = self.level1_tables()[j].pick(u)
                else:
                    cum = np.cumsum(self.singleton_mass(int(t))[:, j])
                    idx = np.searchsorted(cum, u, side="right")
                    tent = np.zeros((len(sel), n), dtype=bool)
                    hit = idx < n
                    tent[np.nonzero(hit)[0], idx[hit]] = True
                keep = keep_u[sel] < self.retention(int(t))[:, j]
                out[sel, :, j] = tent & keep
        return out

    def sample(self, rng) -> Allocation:
        return _to_allocation(self.sample_batch(rng, 1)[0])


def dyadic_level(p) -> np.ndarray:
    """Smallest t >= 1 with p < 1 - 2^-t (so level t has probability 2^-t)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    r = np.ones(p.shape, dtype=int)
    rem = p >= 0.5
    while np.any(rem) and r.max() < MAX_LEVEL:
        r[rem] += 1
        rem = p >= 1 - 2.0 ** -r.astype(float)
    return r


def simulate_midr(instance, alpha, estimator, rng, plan=None) -> Allocation:
    """Round the optimum using only the estimator's successive approximations."""
    plan = plan or SimulationPlan(instance, alpha, estimator)
    return plan.sample(rng)


# ---------------------------------------------------------------- perturbation


def perturb_midr(instance, allocation: Allocation, rng, mu) -> Allocation:
    """With probability mu, replace the outcome by a random single-user grant.

    The replacement gives all channels to a uniformly random user with
    probability sum|S_v| / (n k), and is empty otherwise.
    """
    if mu == 0:
        return allocation
    gen = keyed(as_seed(rng), PHASE_PERTURB)
    u = gen.random(3)
    if u[0] >= mu:
        return allocation
    n, k = instance.n, instance.k
    beta = sum(len(s) for s in allocation.sets) / (n * k)
    if u[1] >= beta:
        return Allocation.empty(n)
    v = min(int(u[2] * n), n - 1)
    sets = [frozenset()] * n
    sets[v] = frozenset(range(k))
    return Allocation(tuple(sets))


def marginals_csv(x, alpha, empirical=None, seed=None, gap=None) -> str:
    """CSV rows (user, channel, x, target, empirical) for audit."""
    x = np.asarray(x, dtype=float)
    tgt = _marginals(x, alpha)
    lines = []
    if seed is not None:
        lines.append(f"# seed={seed}")
    if gap is not None:
        lines.append(f"# gap={gap!r}")
    lines.append("user,channel,x,target,empirical")
    for v in range(x.shape[0]):
        for j in range(x.shape[1]):
            emp = "" if empirical is None else repr(float(empirical[v, j]))
            lines.append(f"{v},{j},{float(x[v, j])!r},{float(tgt[v, j])!r},{emp}")
    return "\n".join(lines) + "\n"
