"""Command-line driver.

Subcommands mirror the pipeline stages; `pipeline` runs them all (or a
single one via --stage).  Exit codes: 0 success, 1 input/configuration
error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, load_config
from .lifetables import FitError
from .pipeline import STAGES, run_pipeline, run_stage

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NUMERICAL_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="annuity-auctions",
        description="Simulate, estimate and evaluate private annuity auction markets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages")
        p.add_argument("--config", default=None, help="YAML scenario configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out-dir", default="out", help="output directory (default: ./out)")
        if name == "pipeline":
            p.add_argument("--stage", default=None, choices=STAGES, help="rerun a single stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
    except (ConfigError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    try:
        if args.command == "pipeline":
            stages = (args.stage,) if args.stage else None
            manifest = run_pipeline(cfg, args.out_dir, stages=stages)
            total = sum(manifest.wall_clock.values())
            print(f"pipeline complete in {total:.1f}s (config {manifest.config_hash})")
        else:
            outputs = run_stage(cfg, args.out_dir, args.command)
            print(f"{args.command}: wrote {', '.join(outputs)}")
        return EXIT_OK
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (FitError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except ValueError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
