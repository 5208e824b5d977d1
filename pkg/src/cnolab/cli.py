"""Command-line entry point: ``cnolab <command> --config PATH [--out DIR] [--seed N] [--resolution R]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .cno import NumericError
from .config import STRATEGY_NAMES, ConfigError, load_config
from .fields import TensorFormatError
from .solvers.datasets import DatasetGenerationError
from .solvers.etdrk4 import SolverDivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (INI)")
    common.add_argument("--out", help="run directory; overrides [experiment] output_dir")
    common.add_argument("--seed", type=int, help="master seed; overrides [experiment] seed")
    common.add_argument("--resolution", type=int, choices=(64, 128), help="grid resolution")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cnolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate source and target datasets")
    sub.add_parser("pretrain", parents=[common], help="train the source CNO")
    p = sub.add_parser("transfer", parents=[common], help="run one transfer strategy over the repeat seeds")
    p.add_argument("--strategy", choices=STRATEGY_NAMES)
    p.add_argument("--target", help="target label (default: [experiment] transfer_target)")
    p = sub.add_parser("sweep-nt", parents=[common], help="NLT vs supervised over target sample counts")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--target")
    sub.add_parser("mmd", parents=[common], help="MMD between the source and every target")
    sub.add_parser("report", parents=[common], help="tables and figures from stored results")
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config, {"output_dir": args.out, "seed": args.seed, "resolution": args.resolution})
    if args.command == "generate":
        for label in ex.cmd_generate(cfg):
            print(f"{label}: {ex.data_dir(cfg)}")
    elif args.command == "pretrain":
        result = ex.cmd_pretrain(cfg)
        print(f"source test error {result['source_test_error']:.4f}% (mean-field baseline {result['mean_field_error']:.4f}%)")
    elif args.command == "transfer":
        result = ex.cmd_transfer(cfg, args.strategy, args.target)
        print(f"{result.strategy}: mean {result.mean:.4f}% std {result.std:.4f}% over seeds {result.seeds}")
    elif args.command == "sweep-nt":
        print(ex.cmd_sweep_nt(cfg, args.sizes, args.target))
    elif args.command == "mmd":
        print(ex.cmd_mmd(cfg))
    elif args.command == "report":
        for name, path in ex.cmd_report(cfg).items():
            print(f"{name}: {path}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverDivergenceError, DatasetGenerationError, NumericError) as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ex.DataError, TensorFormatError, FileNotFoundError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
