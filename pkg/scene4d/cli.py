import argparse
import logging
import sys
from typing import Sequence

from scene4d.config import PROFILES, configure_logging, load_config
from scene4d.errors import (CalibrationError, ConfigError, FormatError,
                            StageError)
from scene4d.pipeline import parse_frame_range, run
from scene4d.synth import load_scene_spec, synth_scene, write_synth

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scene4d",
        description="Temporally coherent multi-view segmentation and "
                    "depth reconstruction")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="reconstruct a frame sequence")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--frames", help="inclusive range a..b")
    run_p.add_argument("--profile", choices=sorted(PROFILES))
    run_p.add_argument("--dump-debug", action="store_true")

    synth_p = sub.add_parser("synth", help="render a synthetic sequence")
    synth_p.add_argument("--spec", required=True)
    synth_p.add_argument("--out", required=True)
    return parser


def _run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, profile=args.profile)
        frames = parse_frame_range(args.frames) if args.frames else None
    except ValueError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    try:
        report = run(config, args.out, frames, dump_debug=args.dump_debug)
    except (ConfigError, CalibrationError, FormatError) as e:
        logger.error("input error: %s", e)
        return EXIT_CONFIG
    except StageError as e:
        logger.error("stage failure: %s", e)
        return EXIT_STAGE
    if report.failed:
        logger.error("frames failed: %s", report.failed)
        return EXIT_STAGE
    return EXIT_OK


def _synth(args: argparse.Namespace) -> int:
    try:
        spec = load_scene_spec(args.spec)
    except ConfigError as e:
        logger.error("scene spec error: %s", e)
        return EXIT_CONFIG
    write_synth(args.out, synth_scene(spec))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.command == "run":
        return _run(args)
    return _synth(args)


if __name__ == "__main__":
    sys.exit(main())
