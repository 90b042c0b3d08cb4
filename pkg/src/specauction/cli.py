"""Command-line front end: ``generate``, ``run`` and ``verify``.

Every output starts with the package version and the seed, and contains no
timestamps, so identical inputs and flags give byte-identical files.
Exit codes: 0 success, 1 verification failure, 2 usage, 3 valuation or graph
class mismatch, 4 internal or optimization failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from specauction import __version__
from specauction.decomposition import (decompose_channel, decompose_count_solution,
                                       verify_decomposition)
from specauction.errors import (AuctionError, DecompositionError, DomainError, ModeError,
                                OptimizationError, RoundingFailure, SimulationError,
                                SizeError, SolverError)
from specauction.fixtures import greedy_example
from specauction.graph import (gen_physical_model, gen_protocol_model, gen_random_graph,
                               is_independent)
from specauction.greedy import local_ratio_greedy, local_ratio_residuals, monotone_greedy
from specauction.instance import Allocation, Instance
from specauction.lp import build_symmetric_lp, solve_packing_lp
from specauction.mechanism import (PreparedMidr, lavi_swamy_mechanism, midr_mechanism,
                                   monotonicity_probe, prepare_lavi_swamy,
                                   random_misreport, random_mrs, truthfulness_probe)
from specauction.midr import (MidrConfig, RoundingPlan, maximize_expected_welfare)
from specauction.rng import keyed, trial_seed
from specauction.rounding import effective_rho, round_unweighted, round_weighted
from specauction.valuations import SymmetricValuation

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DOMAIN, EXIT_INTERNAL = 0, 1, 2, 3, 4
WORKERS_ENV = "SPECAUCTION_WORKERS"
SUITES = ("feasibility", "marginals", "monotonicity", "truthfulness", "decomposition",
          "golden-fig1")
ALGORITHMS = ("alg1", "alg2", "lavi-swamy", "midr", "midr-exact", "local-ratio",
              "monotone-greedy")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output

def _write(path, text):
    """Write atomically (temp file + rename) or to stdout when no path is given."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load_instance(path):
    if path is None:
        raise UsageError("an instance file is required")
    try:
        with open(path) as fh:
            return Instance.loads(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed instance file {path}: {exc}") from exc


# ---------------------------------------------------------------- generate

def _random_valuations(kind, n, k, rng):
    if kind == "zero":
        return [SymmetricValuation((0.0,) * (k + 1)) for _ in range(n)]
    if kind == "symmetric":
        zero = SymmetricValuation((0.0,) * (k + 1))
        return [random_misreport(zero, rng) for _ in range(n)]
    if kind == "mrs":
        return [random_mrs(k, rng) for _ in range(n)]
    raise UsageError(f"unknown valuation kind {kind!r}")


def _random_links(n, side, min_len, max_len, rng):
    links = []
    for _ in range(n):
        s = rng.uniform(0, side, 2)
        ang = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(min_len, max_len)
        r = s + length * np.array([math.cos(ang), math.sin(ang)])
        links.append((tuple(s.tolist()), tuple(r.tolist())))
    return links


def cmd_generate(args):
    rng = np.random.default_rng(args.seed)
    if args.n < 1 or args.k < 1:
        raise UsageError("--n and --k must be positive")
    params = {"model": args.model, "n": args.n, "k": args.k, "valuation": args.valuation}
    if args.model == "protocol":
        if args.radius <= 0 or args.side <= 0:
            raise UsageError("--radius and --side must be positive")
        pts = rng.uniform(0, args.side, (args.n, 2))
        g, order = gen_protocol_model(pts, args.radius, args.seed)
        params.update(radius=args.radius, side=args.side)
    elif args.model == "physical":
        if args.links:
            try:
                with open(args.links) as fh:
                    links = [tuple(tuple(p) for p in link) for link in json.load(fh)]
            except (OSError, json.JSONDecodeError, TypeError) as exc:
                raise UsageError(f"cannot read links from {args.links}: {exc}") from exc
            # the file decides the user count
            args.n = params["n"] = len(links)
        else:
            links = _random_links(args.n, args.side, args.min_len, args.max_len, rng)
        g, order = gen_physical_model(links, args.pathloss, args.beta, args.noise, args.seed)
        params.update(pathloss=args.pathloss, beta=args.beta, noise=args.noise,
                      links=[list(map(list, link)) for link in links])
    else:
        if not 0 <= args.edge_prob <= 1:
            raise UsageError("--edge-prob must lie in [0, 1]")
        g, order = gen_random_graph(args.n, args.edge_prob, args.weighted,
                                    int(rng.integers(0, 2**31 - 1)))
        params.update(edge_prob=args.edge_prob, weighted=args.weighted)
    vals = _random_valuations(args.valuation, args.n, args.k, rng)
    inst = Instance(g, order, args.k, vals,
                    {"generator": params, "seed": args.seed, "version": __version__})
    _write(args.out, inst.dumps())
    return EXIT_OK


# ---------------------------------------------------------------- run

def _run_trial(instance, algorithm, seed, opts):
    """One run; returns (allocation, payments)."""
    n = instance.n
    zero = np.zeros(n)
    if algorithm in ("alg1", "alg2"):
        instance.require("symmetric")
        x = opts["lp"].x
        if algorithm == "alg1":
            if not instance.graph.unweighted:
                raise ModeError("alg1 needs an unweighted conflict graph")
            return round_unweighted(instance, x, seed, rho=effective_rho(instance.rho, True)), zero
        return round_weighted(instance, x, seed, rho=effective_rho(instance.rho, False)), zero
    if algorithm == "lavi-swamy":
        out = lavi_swamy_mechanism(instance, seed, prepared=opts["prepared"])
        return out.allocation, out.payments
    if algorithm in ("midr", "midr-exact"):
        out = midr_mechanism(instance, rng=seed, fast=algorithm == "midr-exact",
                             prepared=opts["prepared"])
        return out.allocation, out.payments
    if instance.k != 1:
        raise ModeError("single-channel greedy algorithms need k = 1")
    instance.require("symmetric")
    bids = [val.values[1] for val in instance.valuations]
    fn = local_ratio_greedy if algorithm == "local-ratio" else monotone_greedy
    users = fn(instance.graph, instance.ordering.order, bids)
    return Allocation(tuple(frozenset({0}) if v in users else frozenset()
                            for v in range(n))), zero


def _trial_row(job):
    instance, algorithm, seed, t, opts = job
    start = time.perf_counter()
    alloc, pay = _run_trial(instance, algorithm, trial_seed(seed, t), opts)
    elapsed = time.perf_counter() - start
    return (t, alloc.welfare(instance), alloc.is_feasible(instance.graph),
            [float(p) for p in pay], elapsed)


def _midr_config(instance, args):
    base = MidrConfig.for_instance(instance)
    alpha = args.alpha_start if args.alpha_start is not None else base.alpha
    return MidrConfig(alpha=alpha, mu=args.mu, tol_gap=args.tol)


def cmd_run(args):
    instance = _load_instance(args.instance)
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    opts = {"alpha": args.alpha_start}
    header = [f"# specauction {__version__}", f"# seed={args.seed}",
              f"# algorithm={args.algorithm} trials={args.trials}"]
    if args.algorithm in ("alg1", "alg2", "lavi-swamy"):
        instance.require("symmetric")
        opts["lp"] = solve_packing_lp(build_symmetric_lp(instance))
        header.append(f"# lp_value={opts['lp'].objective_value!r} rho={instance.rho!r}")
    if args.algorithm in ("midr", "midr-exact"):
        instance.require("mrs")
        opts["prepared"] = PreparedMidr(instance, _midr_config(instance, args))
    if args.algorithm == "lavi-swamy":
        opts["prepared"] = prepare_lavi_swamy(instance, args.alpha_start)
    jobs = [(instance, args.algorithm, args.seed, t, opts) for t in range(args.trials)]
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers > 1 and args.trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_trial_row, jobs))
    else:
        rows = [_trial_row(j) for j in jobs]
    cols = "trial,welfare,feasible,payments" + (",runtime_s" if args.timing else "")
    lines = header + [cols]
    for t, w, feas, pay, elapsed in rows:
        line = f"{t},{w!r},{int(feas)},{';'.join(repr(p) for p in pay)}"
        if args.timing:
            line += f",{elapsed:.6f}"
        lines.append(line)
    welfare = np.array([r[1] for r in rows])
    sd = float(welfare.std(ddof=1)) if len(welfare) > 1 else 0.0
    lines.append(f"mean,{float(welfare.mean())!r},,")
    lines.append(f"std,{sd!r},,")
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- verify

def _suite_feasibility(instance, args):
    g = instance.graph
    runs, bad = 0, 0
    algos = []
    if instance.kind == "symmetric":
        algos = (["alg1"] if g.unweighted else []) + ["alg2", "lavi-swamy"]
        if instance.k == 1 and g.unweighted:
            algos += ["local-ratio", "monotone-greedy"]
    elif instance.kind == "mrs":
        algos = ["midr", "midr-exact"]
    opts = {"alpha": args.alpha_start}
    if instance.kind == "symmetric":
        opts["lp"] = solve_packing_lp(build_symmetric_lp(instance))
        opts["prepared"] = prepare_lavi_swamy(instance, args.alpha_start)
    elif algos:
        opts["prepared"] = PreparedMidr(instance, _midr_config(instance, args))
    per = {}
    for algo in algos:
        v = 0
        for t in range(args.trials):
            alloc, _ = _run_trial(instance, algo, trial_seed(args.seed, t), opts)
            v += len(alloc.violations(g))
            runs += 1
        per[algo] = v
        bad += v
    return bad == 0, {"runs": runs, "violations": bad, "per_algorithm": per}


def _suite_marginals(instance, args):
    samples = max(args.samples, 1)
    factor = args.corrupt_alpha
    if instance.kind == "mrs":
        cfg = _midr_config(instance, args)
        sol = maximize_expected_welfare(instance, config=cfg)
        plan = RoundingPlan(instance, sol.x, cfg.alpha)
        freq = plan.sample_batch(args.seed, samples).mean(axis=0)
        target = -np.expm1(-sol.x / (2 * cfg.alpha * factor))
    else:
        lp = solve_packing_lp(build_symmetric_lp(instance))
        dec = decompose_count_solution(instance, lp.x, alpha_start=args.alpha_start,
                                       seed=args.seed)
        u = keyed(args.seed, 0).random(samples)
        cum = np.cumsum(dec.weights)
        idx = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
        counts = np.zeros((instance.n, instance.k))
        for i, c in zip(*np.unique(idx, return_counts=True)):
            for v, s in enumerate(dec.entries[i][1].sets):
                if s:
                    counts[v, len(s) - 1] += c
        freq = counts / samples
        target = lp.x / (dec.alpha_achieved * factor)
    sd = np.sqrt(target * (1 - target) / samples)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, np.abs(freq - target) / sd,
                     np.where(np.abs(freq - target) > 0, np.inf, 0.0))
    worst = float(z.max()) if z.size else 0.0
    return worst <= 4.0, {"samples": samples, "max_sigma": worst,
                          "alpha_factor": factor}


def _suite_monotonicity(instance, args):
    if instance.k != 1 or not instance.graph.unweighted or instance.kind != "symmetric":
        raise ModeError("monotonicity suite needs k = 1, unweighted graph, scalar bids")
    rng = np.random.default_rng(args.seed)
    bids = [val.values[1] for val in instance.valuations]
    top = max(max(bids), 1.0)
    failures, lr_violations = [], 0
    for v in range(instance.n):
        grid = sorted(set(np.round(rng.uniform(0, 2 * top, max(args.trials, 2)), 6).tolist())
                      | {bids[v]})
        ok, wit = monotonicity_probe(monotone_greedy, instance, v, grid)
        if not ok:
            failures.append({"bidder": v, "witness": list(wit)})
        ok2, _ = monotonicity_probe(local_ratio_greedy, instance, v, grid)
        lr_violations += not ok2
    return not failures, {"monotone_greedy_failures": failures,
                          "local_ratio_violations": lr_violations}


def _suite_truthfulness(instance, args):
    rng = np.random.default_rng(args.seed)
    if instance.kind == "mrs":
        mech, cfg = midr_mechanism, _midr_config(instance, args)
    elif instance.kind == "symmetric":
        mech, cfg = lavi_swamy_mechanism, None
    else:
        raise ModeError("truthfulness suite needs a single valuation class")
    worst, tol, rows = math.inf, 0.0, []
    for v in range(instance.n):
        mis = [random_misreport(instance.valuations[v], rng) for _ in range(max(args.trials, 1))]
        rep = truthfulness_probe(mech, instance, v, mis, mode="exact", seed=args.seed,
                                 config=cfg, alpha=args.alpha_start)
        worst, tol = min(worst, rep.min_delta), rep.tolerance
        rows.extend(rep.deltas)
    return worst >= -tol, {"min_delta": worst, "tolerance": tol, "probes": len(rows)}


def _suite_decomposition(instance, args):
    errs, oks = [], []
    if instance.kind == "symmetric":
        lp = solve_packing_lp(build_symmetric_lp(instance))
        dec = decompose_count_solution(instance, lp.x, alpha_start=args.alpha_start,
                                       seed=args.seed)
        ok, err = verify_decomposition(dec, lp.x, graph=instance.graph)
        oks.append(ok)
        errs.append(err)
        alphas = [dec.alpha_achieved]
    else:
        cfg = _midr_config(instance, args)
        sol = maximize_expected_welfare(instance, config=cfg)
        alphas = []
        for j in range(instance.k):
            dec = decompose_channel(instance.graph, instance.ordering.order, instance.rho,
                                    sol.x[:, j], alpha_start=args.alpha_start, seed=args.seed)
            ok, err = verify_decomposition(dec, sol.x[:, j], graph=instance.graph)
            oks.append(ok)
            errs.append(err)
            alphas.append(dec.alpha_achieved)
    return all(oks), {"max_marginal_error": max(errs), "alpha_achieved": alphas}


def _suite_golden(args):
    g, order, data = greedy_example()
    checks = {}
    for name, var in sorted(data["variants"].items()):
        res = local_ratio_residuals(g, order.order, var["bids"])
        s = local_ratio_greedy(g, order.order, var["bids"])
        checks[f"{name}_set"] = sorted(s) == var["local_ratio_set"]
        checks[f"{name}_residuals"] = all(res[v] == r for v, r in var["residuals"].items())
        if "monotone_greedy_set" in var:
            m = monotone_greedy(g, order.order, var["bids"])
            checks[f"{name}_monotone_set"] = sorted(m) == var["monotone_greedy_set"]
            checks[f"{name}_monotone_welfare"] = (
                sum(var["bids"][u] for u in m) == var["monotone_greedy_welfare"])
        checks[f"{name}_independent"] = is_independent(g, s)
    v = data["probe_vertex"]
    base = data["variants"]["x3"]["bids"]
    inst = _scalar_instance(g, order, base)
    grid = data["probe_grid"]
    lr_ok, wit = monotonicity_probe(local_ratio_greedy, inst, v, grid, bids=base)
    mg_ok, _ = monotonicity_probe(monotone_greedy, inst, v, grid, bids=base)
    checks["local_ratio_violation"] = (not lr_ok) and list(wit) == grid
    checks["monotone_greedy_monotone"] = mg_ok
    return all(checks.values()), {k: bool(c) for k, c in checks.items()}


def _scalar_instance(g, order, bids):
    return Instance(g, order, 1, [SymmetricValuation((0.0, float(b))) for b in bids])


def cmd_verify(args):
    if args.suite == "golden-fig1":
        ok, metrics = _suite_golden(args)
    else:
        instance = _load_instance(args.instance)
        fn = {"feasibility": _suite_feasibility, "marginals": _suite_marginals,
              "monotonicity": _suite_monotonicity, "truthfulness": _suite_truthfulness,
              "decomposition": _suite_decomposition}[args.suite]
        ok, metrics = fn(instance, args)
    report = {"suite": args.suite, "pass": bool(ok), "metrics": metrics,
              "seed": args.seed, "version": __version__}
    _write(args.out, _dump_json(report))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="specauction",
                                description="Spectrum auctions over conflict graphs")
    p.add_argument("--version", action="version", version=f"specauction {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output path (default stdout)")

    gen = sub.add_parser("generate", help="write a random instance file")
    common(gen)
    gen.add_argument("--model", choices=("protocol", "physical", "random-graph"),
                     required=True)
    gen.add_argument("--n", type=int, default=8)
    gen.add_argument("--k", type=int, default=2)
    gen.add_argument("--valuation", choices=("symmetric", "mrs", "zero"), default="symmetric")
    gen.add_argument("--side", type=float, default=10.0)
    gen.add_argument("--radius", type=float, default=3.0)
    gen.add_argument("--edge-prob", type=float, default=0.3)
    gen.add_argument("--weighted", action="store_true")
    gen.add_argument("--links", default=None,
                     help="JSON file with a list of [[sx, sy], [rx, ry]] links")
    gen.add_argument("--min-len", type=float, default=0.5)
    gen.add_argument("--max-len", type=float, default=2.0)
    gen.add_argument("--pathloss", type=float, default=3.0)
    gen.add_argument("--beta", type=float, default=1.0)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run an algorithm or mechanism on an instance")
    common(run)
    run.add_argument("instance")
    run.add_argument("--algorithm", choices=ALGORITHMS, required=True)
    run.add_argument("--trials", type=int, default=10)
    run.add_argument("--tol", type=float, default=1e-9)
    run.add_argument("--alpha-start", type=float, default=None)
    run.add_argument("--mu", type=float, default=None)
    run.add_argument("--timing", action="store_true",
                     help="add a runtime column (breaks byte-identical reruns)")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run a verification suite")
    common(ver)
    ver.add_argument("instance", nargs="?")
    ver.add_argument("--suite", choices=SUITES, required=True)
    ver.add_argument("--trials", type=int, default=10)
    ver.add_argument("--samples", type=int, default=100_000,
                     help="draws for the marginals suite")
    ver.add_argument("--tol", type=float, default=1e-9)
    ver.add_argument("--alpha-start", type=float, default=None)
    ver.add_argument("--mu", type=float, default=None)
    ver.add_argument("--corrupt-alpha", type=float, default=1.0,
                     help="scale the target alpha (negative control for marginals)")
    ver.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"specauction: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModeError, SizeError) as exc:
        print(f"specauction: domain mismatch: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except DomainError as exc:
        print(f"specauction: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, OptimizationError, DecompositionError, RoundingFailure,
            SimulationError) as exc:
        print(f"specauction: internal failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except AuctionError as exc:
        print(f"specauction: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
