"""Command-line entry point: ``sve <experiment> --config PATH --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, validate
from .errors import CapabilityError, ConfigError, DependencyError, FormatError
from .experiments import run

COMMANDS = ("pretrain", "finetune", "eval", "ood", "shift-sweep", "members-ablation",
            "backbone-quality", "diversity")

EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_FORMAT = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="sve", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="DIR", help="output directory (default: config output_dir)")
        p.add_argument("--seed-override", type=int, metavar="SEED",
                       help="run this single seed instead of the configured list")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg.experiment = args.command.replace("-", "_")
        if args.seed_override is not None:
            cfg.seeds = [args.seed_override]
        validate(cfg)
    except ConfigError as exc:
        print(f"sve: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"sve: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run(cfg, args.out)
    except DependencyError as exc:
        print(f"sve: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (FormatError, CapabilityError) as exc:
        print(f"sve: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return 0


if __name__ == "__main__":
    sys.exit(main())
