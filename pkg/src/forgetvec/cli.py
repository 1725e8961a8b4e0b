"""Command-line entry point: ``forgetvec {train,unlearn,compose,sweep,report}``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import experiment
from .composition import CompatibilityError
from .forget_vector import OptimizationError
from .nn import ConfigError, InputError

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


def _output_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(experiment.OUT_ENV):
        return Path(os.environ[experiment.OUT_ENV])
    if cfg is not None and cfg.output_dir:
        return cfg.resolve(cfg.output_dir)
    return Path("runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetvec", description="Forget-vector unlearning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train the original model"),
        ("unlearn", "run one unlearning method and write its report"),
        ("compose", "compose class-wise forget vectors"),
        ("sweep", "robustness and hyperparameter sweeps"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        if name == "unlearn":
            p.add_argument("--timing", action="store_true", help="record wall-clock runtime in the report")
    p = sub.add_parser("report", help="aggregate report JSON files into mean and std")
    p.add_argument("paths", nargs="+", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--ddof", type=int, default=1, choices=(0, 1), help="1 = sample std (default), 0 = population std")
    return parser


def run(args) -> int:
    if args.command == "report":
        _, text = experiment.run_report(args.paths, _output_dir(args, None), args.ddof)
        sys.stdout.write(text)
        return 0
    cfg = experiment.load_config(args.config, args.seed)
    out = _output_dir(args, cfg)
    if args.command == "train":
        paths = [experiment.run_train(cfg, out)]
    elif args.command == "unlearn":
        paths = [experiment.run_unlearn(cfg, out, timing=args.timing)]
    elif args.command == "compose":
        paths = experiment.run_compose(cfg, out)
    else:
        paths = experiment.run_sweep(cfg, out)
    for p in paths:
        print(p)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputError, CompatibilityError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
