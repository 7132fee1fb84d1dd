"""Command-line driver: ``cemgms solve|sweep|estimate|make-field <config>``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .estimator import ZeroReferenceError
from .experiments import (ConfigError, StageError, load_config, make_field_file, run_basis_sweep,
                          run_estimator, run_fracture, run_h_sweep, run_layer_sweep, solve)

SWEEPS = {
    "basis_sweep": run_basis_sweep,
    "layer_sweep": run_layer_sweep,
    "h_sweep": run_h_sweep,
    "fracture": run_fracture,
}


def _print_table(header, rows) -> None:
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.6e}" if isinstance(v, float) else str(v) for v in r))


def cmd_solve(cfg, args) -> int:
    if cfg.study in SWEEPS:
        return cmd_sweep(cfg, args)
    if cfg.study == "estimator":
        return cmd_estimate(cfg, args)
    res = solve(cfg, args.out, args.threads)
    print(f"eps = {res.eps:.6e}")
    print(f"eps_a = {res.eps_a:.6e}")
    return 0


def cmd_sweep(cfg, args) -> int:
    run = SWEEPS.get(cfg.study, run_h_sweep)
    header, rows = run(cfg, args.out, args.threads)
    _print_table(header, rows)
    return 0 if all(r[-1] == "ok" for r in rows) else 3


def cmd_estimate(cfg, args) -> int:
    cfg = cfg.replace(study="estimator")
    header, rows, _ = run_estimator(cfg, args.out, args.threads)
    _print_table(header, rows)
    return 0 if all(r[-1] == "ok" for r in rows) else 3


def cmd_make_field(cfg, args) -> int:
    print(make_field_file(cfg, args.out))
    return 0


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "estimate": cmd_estimate,
            "make-field": cmd_make_field}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cemgms", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--threads", type=int, default=1, help="worker cap for per-element solves")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        if isinstance(exc.cause, ZeroReferenceError):
            print(f"error: {exc.cause} (zero source and zero initial data?)", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
