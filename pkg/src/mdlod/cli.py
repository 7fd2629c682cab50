"""Command line entry point: ``mdlod validate|solve|convergence|decay``."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from collections import defaultdict

from .experiments import (ConfigError, ExperimentError, fit_rates, load_config, resolve_geometry, rows_to_csv,
                          run_experiment, write_csv)
from .geometry import GeometryError, load_geometry, validate_domain

log = logging.getLogger("mdlod")


def _load(args):
    c = load_config(args.config)
    if args.seed is not None:
        c = c.with_seed(args.seed)
    if args.threads is not None:
        c.threads = args.threads
    if args.out is not None:
        c.output = args.out
    return c


def _emit(rows, c):
    if c.output:
        write_csv(rows, c.output)
        print(f"wrote {len(rows)} rows to {c.output}", file=sys.stderr)
    else:
        sys.stdout.write(rows_to_csv(rows))


def cmd_validate(args) -> int:
    d = load_geometry(args.geometry)
    nb, ni, nj = d.counts()
    print(f"bulk segments: {nb}, interface segments: {ni}, junctions: {nj}")
    bad = validate_domain(d)
    for v in bad:
        print(f"violation [{v.kind}] {' '.join(str(s) for s in v.segments)}: {v.message}")
    return 1 if bad else 0


def cmd_solve(args) -> int:
    c = _load(args)
    c.H, c.ell = c.H[:1], c.ell[:1]
    c.output = None
    rows = run_experiment(c)
    _emit(rows, _with_out(c, args.out))
    return 0


def _with_out(c, out):
    c.output = out
    return c


def cmd_convergence(args) -> int:
    c = _load(args)
    out = c.output
    c.output = None
    rows = run_experiment(c)
    _emit(rows, _with_out(c, out))
    by_ell = defaultdict(list)
    for r in rows:
        by_ell[r.ell].append(r)
    for ell, rs in sorted(by_ell.items()):
        if len(rs) < 2:
            continue
        try:
            fit = fit_rates(rs, "h-rate")
        except ValueError as err:
            print(f"ell={ell}: {err}", file=sys.stderr)
            continue
        tag = "inf" if math.isinf(ell) else int(ell)
        eocs = " ".join(f"{e:.3f}" for e in fit.steps)
        print(f"ell={tag}: EOC {eocs}  (least squares {fit.slope:.3f})", file=sys.stderr)
    return 0


def cmd_decay(args) -> int:
    c = _load(args)
    out = c.output
    c.output = None
    rows = run_experiment(c)
    _emit(rows, _with_out(c, out))
    by_H = defaultdict(list)
    for r in rows:
        by_H[r.H].append(r)
    for H, rs in sorted(by_H.items(), reverse=True):
        try:
            fit = fit_rates(rs, "ell-decay")
        except ValueError as err:
            print(f"H={H:g}: {err}", file=sys.stderr)
            continue
        print(f"H={H:g}: decay slope {fit.slope:.3f} per layer", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdlod", description="Mixed-dimensional LOD experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a geometry file or builtin geometry")
    v.add_argument("geometry")
    v.set_defaults(func=cmd_validate)

    for name, fn, text in (("solve", cmd_solve, "run the first (H, ell) cell of a config"),
                           ("convergence", cmd_convergence, "run a config and fit rates in H"),
                           ("decay", cmd_decay, "run a config and fit decay in ell")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--out", default=None, help="CSV output path (default: stdout)")
        s.add_argument("--seed", type=int, default=None, help="override the seed of random coefficients")
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, GeometryError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
