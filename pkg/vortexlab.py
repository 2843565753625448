"""
Command-line entry point for the vortexlab numerical laboratory.

    vortexlab <subcommand> --config <path> [--out <dir>] [--threads N]

Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
4 dynamics blow-up.
"""

import argparse
import logging
import sys
from typing import List, Optional

from config import get_config
from experiments import EXPERIMENTS, run
from utils.errors import VortexLabError

logger = logging.getLogger('vortexlab')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def setup_logging(settings) -> None:
    """Configure the root logger once: stderr always, a file when LOG_FILE is set."""
    root = logging.getLogger()
    if root.handlers:
        return
    root.setLevel(getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO))
    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    root.addHandler(stream)
    if settings.LOG_FILE:
        file_handler = logging.FileHandler(settings.LOG_FILE)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vortexlab',
                                     description='Abelian Higgs vortex experiments')
    parser.add_argument('subcommand', choices=EXPERIMENTS)
    parser.add_argument('--config', required=True, help='TOML experiment file')
    parser.add_argument('--out', default=None, help='output directory (overrides output_dir)')
    parser.add_argument('--threads', type=int, default=None,
                        help='worker processes (default: VORTEXLAB_THREADS or 1)')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one experiment and return its exit code."""
    args = build_parser().parse_args(argv)
    settings = get_config()
    setup_logging(settings)

    try:
        settings.validate()
        threads = settings.thread_count() if args.threads is None else args.threads
        if threads < 1:
            raise ValueError("--threads must be a positive integer")
    except ValueError as e:
        logger.error(f"Invalid runtime settings: {e}")
        print(f"vortexlab: {e}", file=sys.stderr)
        return 2

    try:
        report = run(args.config, args.subcommand, args.out, threads)
    except VortexLabError as e:
        logger.error(f"{args.subcommand} failed ({type(e).__name__}): {e}")
        print(f"vortexlab: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.subcommand}: {e}")
        print(f"vortexlab: unexpected error: {e}", file=sys.stderr)
        return 1

    logger.info(f"{args.subcommand}: {len(report.artifacts)} artifacts, "
                f"{report.wall_clock:.2f} s")
    return 0


if __name__ == '__main__':
    sys.exit(main())
