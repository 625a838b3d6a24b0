"""Command-line entry point.

    charfire simulate    [--config F] [--seed N] [--out DIR]
    charfire regularize  [--config F] [--seed N] [--workers N] [--out DIR]
    charfire fit --model uni|multi [...]
    charfire fri --threshold XI|auto [...]
    charfire report      [--config F] [--out DIR]

Exit codes: 0 success, 1 model or convergence failure, 2 input error.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .config import CONFIG_ENV, ConfigError, load_config
from .firehistory import SparseRecordError
from .multilake import SpatialCovarianceError
from .pipeline import RunDirectoryError, cmd_fit, cmd_fri, cmd_regularize, cmd_report, cmd_simulate
from .records import RecordError
from .regularization import RegularizationError
from .splines import KnotError

EXIT_OK, EXIT_MODEL, EXIT_INPUT = 0, 1, 2

logger = logging.getLogger("charfire")


def _threshold(text: str) -> str:
    if text == "auto":
        return text
    try:
        xi = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1] or 'auto', got {text!r}") from None
    if not 0.0 <= xi <= 1.0:
        raise argparse.ArgumentTypeError("threshold must lie in [0, 1]")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"flat TOML config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="charfire", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic record and its true fires")
    sub.add_parser("regularize", parents=[common], help="select penalties by hold-out loss")
    f = sub.add_parser("fit", parents=[common], help="fit the model and summarize fire history")
    f.add_argument("--model", choices=("uni", "multi"), help="single-lake or multi-lake model")
    r = sub.add_parser("fri", parents=[common], help="recompute events and FRI from stored draws")
    r.add_argument("--threshold", type=_threshold, help="probability threshold or 'auto'")
    sub.add_parser("report", parents=[common], help="write plot-ready tables")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out,
                 "model": getattr(args, "model", None), "threshold": getattr(args, "threshold", None)}
    try:
        cfg = load_config(args.config, **overrides)
        commands = {"simulate": cmd_simulate, "regularize": cmd_regularize, "fit": cmd_fit,
                    "fri": cmd_fri, "report": cmd_report}
        result = commands[args.command](cfg)
    except (RunDirectoryError, FileNotFoundError, RecordError, ConfigError, KnotError,
            PermissionError, IsADirectoryError) as exc:
        print(f"charfire {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RegularizationError, SparseRecordError, SpatialCovarianceError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"charfire {args.command}: model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ValueError as exc:
        print(f"charfire {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    paths = result if isinstance(result, list) else [result]
    for path in paths:
        print(path)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
