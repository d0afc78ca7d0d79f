"""``omm`` command line: run experiments, estimate OPT, run check suites, fit CSVs.

Exit codes: 0 success, 1 config error, 2 check failure, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness
from .optmatch import estimate_opt
from .online import LowestIndexTieBreak, UniformTieBreak, non_increasing_violations
from .space import (certify_violation, child_seed, euclidean, euclidean_power, named_density,
                    verify_approx_triangle)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3


def _grid(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty grid")
    return out


def cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.embed:
        cfg.embed = args.embed
    if args.workers:
        cfg.workers = args.workers
    cfg.validate()
    summary = harness.run_experiment(cfg)
    for cell in summary["cells"]:
        if cell["error"]:
            print(f"{cell['policy']:>24} n={cell['n']:<6} ERROR {cell['error']}")
        else:
            r = cell["ratio"]
            print(f"{cell['policy']:>24} n={cell['n']:<6} ratio={r['mean']:.4f} +- {r['se']:.4f}")
    print(f"wrote {cfg.csv} and {cfg.summary}")
    return EXIT_RUNTIME if summary["errors"] else EXIT_OK


def cmd_opt(args) -> int:
    if args.p != 1.0:
        space = euclidean_power(args.d, args.p)
    else:
        space = euclidean(args.d)
    try:
        dist = named_density(args.dist)
    except KeyError as e:
        raise harness.ConfigError(str(e)) from None
    rows = []
    print("n,mean,se,trials")
    for n in args.n_grid:
        est = estimate_opt(space, dist, n, args.trials, child_seed(args.seed, n).generate_state(1)[0])
        rows.append((n, est.mean))
        print(est.csv_row(n), flush=True)
    if len(rows) >= 4:
        fit = harness.fit_loglog(*zip(*rows))
        print(f"# slope {fit.slope:.4f} r2 {fit.r2:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        rows = harness.read_rows(args.csv)
    except (OSError, ValueError) as e:
        raise harness.ConfigError(str(e)) from None
    policies = sorted({r["policy"] for r in rows}) if not args.policy else [args.policy]
    out = {}
    for key in policies:
        sel = [r for r in rows if r["policy"] == key]
        fit = harness.fit_scaling(sel, args.field, bootstrap=args.bootstrap, seed=args.seed)
        out[key] = fit.__dict__
    print(json.dumps(out, indent=2))
    return EXIT_OK


def check_triangle(args) -> bool:
    space = euclidean_power(args.d, args.p)
    eta = space.eta if args.eta is None else args.eta
    rep = verify_approx_triangle(space, args.triples, args.seed, eta=eta)
    print(f"p={args.p} eta={eta} triples={args.triples} violations={rep.violations} "
          f"worst={rep.worst_ratio:.6f} skipped={rep.skipped}")
    if rep.violations:
        tri = rep.violating_triple
        even = float(args.p).is_integer() and int(args.p) % 2 == 0
        certified = certify_violation(space, tri, eta) if even else "n/a"
        print(f"violating triple {[np.asarray(t).tolist() for t in tri]} certified={certified}")
    return rep.violations == 0


def check_monotone(args) -> bool:
    kinds = ["mnp", "random-subtree"] if args.policy == "both" else [args.policy]
    ok = True
    for kind in kinds:
        cases = harness.monotonicity_suite(kind, (args.max_r, args.max_s), range(args.seed, args.seed + args.cases))
        bad = [c for c in cases if not c.passed and not c.skipped]
        skipped = sum(c.skipped for c in cases)
        print(f"{kind}: {len(cases) - len(bad) - skipped} passed, {len(bad)} failed, {skipped} skipped")
        for c in bad:
            print(f"  counterexample seed={c.seed} S={c.S} S'={c.S_sub} R={c.R} "
                  f"E[S]={c.cost_full} E[S']={c.cost_sub}\n{c.tree}")
        ok = ok and not bad
    return ok


def check_tiebreak(args) -> bool:
    rule = {"uniform": UniformTieBreak(), "lowest-index": LowestIndexTieBreak()}[args.rule]
    bad = non_increasing_violations(rule, args.universe)
    print(f"{args.rule}: {len(bad)} non-increasing violations over subsets of {args.universe}")
    for small, big, s in bad[:10]:
        print(f"  P({s} | {small}) < P({s} | {big})")
    return not bad


def check_nn(args) -> bool:
    ok = True
    dist = named_density("uniform")
    space = euclidean(args.d)
    for n in args.n_grid:
        S = harness.generate_adversarial("grid", n, space, 0)
        res = harness.nn_distance_check(S, dist, args.trials, child_seed(args.seed, n), space)
        fine = res.mean + 3 * res.se >= res.lower_bound
        ok = ok and fine
        print(f"n={n} mean={res.mean:.6g} se={res.se:.2g} scaled={res.mean * n ** (1 / args.d):.4f} "
              f"bound={res.lower_bound:.6g} {'ok' if fine else 'FAIL'}")
    return ok


def cmd_check(args) -> int:
    fn = {"triangle": check_triangle, "monotone": check_monotone,
          "tiebreak": check_tiebreak, "nn": check_nn}[args.suite]
    return EXIT_OK if fn(args) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omm", description="Stochastic online metric matching experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--embed", choices=["none", "hst"], default=None,
                   help="route euclidean instances through a random HST for tree policies")
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("opt", help="Monte Carlo OPT(n) estimates")
    o.add_argument("--dist", default="uniform")
    o.add_argument("--d", type=int, default=1)
    o.add_argument("--p", type=float, default=1.0)
    o.add_argument("--n-grid", type=_grid, default=[64, 128, 256, 512])
    o.add_argument("--trials", type=int, default=200)
    o.add_argument("--seed", type=int, default=7)
    o.set_defaults(func=cmd_opt)

    c = sub.add_parser("check", help="property check suites")
    c.add_argument("suite", choices=["triangle", "monotone", "tiebreak", "nn"])
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--d", type=int, default=2)
    c.add_argument("--p", type=float, default=2.0)
    c.add_argument("--eta", type=float, default=None)
    c.add_argument("--triples", type=int, default=100000)
    c.add_argument("--policy", choices=["mnp", "random-subtree", "both"], default="both")
    c.add_argument("--cases", type=int, default=500)
    c.add_argument("--max-r", type=int, default=4)
    c.add_argument("--max-s", type=int, default=7)
    c.add_argument("--rule", choices=["uniform", "lowest-index"], default="uniform")
    c.add_argument("--universe", type=int, default=4)
    c.add_argument("--n-grid", type=_grid, default=[16, 64, 256, 1024])
    c.add_argument("--trials", type=int, default=20000)
    c.set_defaults(func=cmd_check)

    f = sub.add_parser("fit", help="log-log slope of a field in a trial CSV")
    f.add_argument("csv")
    f.add_argument("--field", default="ratio", choices=["cost", "opt", "ratio", "regret"])
    f.add_argument("--policy", default=None)
    f.add_argument("--bootstrap", type=int, default=1000)
    f.add_argument("--seed", type=int, default=7)
    f.set_defaults(func=cmd_fit)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"runtime abort: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
