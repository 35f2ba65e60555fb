"""Command-line entry point.

Usage: ``dualflow --config run.cfg [--output DIR] [--dump-fields] [--seed N]``.

The command itself (solve-euler, solve-ns, solve-nsp, sweep-nu, verify)
lives in the config file; the flags override its output directory and seed.
Exit codes: 0 success, 2 config error, 3 optimizer failure, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import sys

from .io import ConfigError, load_config, run_from_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualflow",
        description="Dual variational solvers for incompressible flow on the space-time torus.",
    )
    parser.add_argument("--config", required=True, help="path to the run configuration file")
    parser.add_argument("--output", default=None, help="output directory (overrides the config)")
    parser.add_argument(
        "--dump-fields", action="store_true", help="also write dual and primal fields"
    )
    parser.add_argument("--seed", type=int, default=None, help="seed override for randomized checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        code = run_from_config(
            cfg, output=args.output, dump_fields=args.dump_fields, seed=args.seed
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
