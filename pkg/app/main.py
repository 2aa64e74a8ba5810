"""
qdiff - Command Line Interface

Subcommands:
- decompose, couple, image, farfield, specresolve: run one pipeline stage
- run: run every stage (or up to --stage)
- metrics: compare two serialized images

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numba

from app.config import Config, parse_config
from app.models.settings import RunConfig
from app.services.pipeline import Stage, compare_fields, run_pipeline, run_stages
from app.utils.errors import ConfigError, StageError, exit_code_for
from app.utils.logging_config import configure_logging_from_env

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    parser = argparse.ArgumentParser(
        prog="qdiff",
        description="Entangled-photon phase-sensitive diffraction imaging simulator",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_run_options(sub: argparse.ArgumentParser):
        sub.add_argument("--config", required=True, type=Path, help="Run configuration file")
        sub.add_argument("--out", type=Path, help="Output directory (overrides output.directory)")
        sub.add_argument("--threads", type=int, help="Worker threads for numeric kernels")
        sub.add_argument("--seed", type=int, help="Seed of the noise-floor table")

    for stage in Stage:
        add_run_options(commands.add_parser(stage.value, help=f"Run the {stage.value} stage"))

    run = commands.add_parser("run", help="Run all stages")
    add_run_options(run)
    run.add_argument(
        "--stage", choices=[stage.value for stage in Stage], help="Stop after this stage"
    )

    metrics = commands.add_parser("metrics", help="Compare an image against a reference")
    metrics.add_argument("--ref", required=True, type=Path, help="Reference field (.bin)")
    metrics.add_argument("--img", required=True, type=Path, help="Image field (.bin)")
    return parser


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is None:
        return config
    if not 0 <= args.seed < 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    output = config.output.model_copy(update={"seed": args.seed})
    return config.model_copy(update={"output": output})


def _set_threads(requested: Optional[int], env: Config):
    threads = requested if requested is not None else env.threads
    if threads < 0:
        raise ConfigError(f"--threads must be non-negative, got {threads}")
    if threads:
        numba.set_num_threads(threads)
        logger.debug(f"Numeric kernels use {threads} threads")


def execute(args: argparse.Namespace) -> int:
    """
    Run a parsed command.

    Returns:
        Process exit code
    """
    if args.command == "metrics":
        result = compare_fields(args.ref, args.img)
        print(f"nmse {result['nmse']!r}")
        print(f"pearson {result['pearson']!r}")
        return 0

    env = Config()
    errors = env.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    _set_threads(args.threads, env)

    config = _apply_overrides(parse_config(args.config), args)
    out_dir = args.out if args.out is not None else Path(config.output.directory)

    if args.command == "run":
        stop_after = Stage(args.stage) if args.stage else None
        manifest = run_pipeline(config, out_dir, stop_after)
        print(manifest)
    else:
        run_stages(config, out_dir, [Stage(args.command)])
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the `qdiff` console script."""
    args = build_parser().parse_args(argv)
    configure_logging_from_env("DEBUG" if args.verbose else None)
    try:
        return execute(args)
    except StageError as e:
        logger.error(f"Stage {e.stage} failed: {e.error}", exc_info=True)
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
