"""
Command-line interface (CLI) for the sampled batch normalization toolkit.

Runs one experiment command (train, microbn, bench, analyze, decay-sweep)
from a YAML config file, writes its CSV/JSON artifacts and prints a summary.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import COMMANDS, ConfigError, load_config
from .experiments import EXIT_CONFIG, EXIT_CRASH, CommandResult, run

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train, analyse and benchmark sampled batch normalization."
    )
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run.")
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="Path to the YAML run config (defaults apply when omitted).",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Master seed; overrides the config file and BNSAMPLING_SEED.",
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=None,
        help="Output directory for manifest.json and the CSV artifacts.",
    )
    parser.add_argument(
        "--jobs",
        type=int,
        default=None,
        help="Worker processes for independent runs (seeds, variants).",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=LOG_LEVELS,
        help="Logging verbosity.",
    )
    return parser


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def print_summary(result: CommandResult) -> None:
    print("\n" + "=" * 60)
    print(f"{result.command.upper()} SUMMARY")
    print("=" * 60)
    for key, value in result.summary.items():
        print(f"{key}: {value}")
    for path in result.artifacts:
        print(f"Wrote {path}")
    print(f"Exit code: {result.exit_code}")
    print("=" * 60)


def main(argv: Sequence[str] | None = None) -> int:
    """Main CLI entry point."""
    args = build_parser().parse_args(list(argv) if argv is not None else None)
    setup_logging(args.log_level)

    try:
        config = load_config(args.config, args.command, seed=args.seed, out=args.out, jobs=args.jobs)
    except ConfigError as e:
        print(f"Invalid configuration, field '{e.field}': {e}", file=sys.stderr)
        return EXIT_CONFIG

    print(f"Running {config.command} (seed {config.seed}) into {config.out}...")
    try:
        result = run(config)
    except ConfigError as e:
        print(f"Invalid configuration, field '{e.field}': {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logging.getLogger(__name__).exception("command failed")
        print(f"{config.command} failed: {e}", file=sys.stderr)
        return EXIT_CRASH

    print_summary(result)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
