"""
Command-line entry point.

    tiny-nodule-detector <command> [--config FILE] [--out DIR] [--seed N] ...

Exit codes: 0 on success, 1 on validation errors (bad flags, config or input
files), 2 on runtime errors. Every run writes DIR/manifest.json.
"""
import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy

from . import Profile, __version__
from .commands import BaseCommand, all_commands
from .exceptions import VALIDATION_ERRORS, ConfigError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class CommandParser(argparse.ArgumentParser):
    """Reports usage errors as ConfigError instead of exiting."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def common_arguments() -> argparse.ArgumentParser:
    parser = CommandParser(add_help=False)
    parser.add_argument("--config", type=Path, help="TOML config file (an .arch file for analyze)")
    parser.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--profile", choices=[p.value for p in Profile])
    parser.add_argument("--threshold", type=float, help="Operating confidence threshold")
    parser.add_argument("--iou-nms", type=float, help="NMS IoU threshold")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    return parser


def build_parser(commands: Sequence[BaseCommand]) -> CommandParser:
    parser = CommandParser(prog="tiny-nodule-detector", description="Tiny pulmonary nodule detection on CT slices")
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CommandParser)
    common = common_arguments()
    for command in commands:
        sub = subparsers.add_parser(command.name, help=command.help, parents=[common])
        command.add_arguments(sub)
        sub.set_defaults(handler=command)
    return parser


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_manifest(out: Path, options: argparse.Namespace, config, digest: Optional[str]):
    """Record what is needed to repeat the run; the output directory itself is left out."""
    recorded = {
        key: _plain(value) for key, value in sorted(vars(options).items()) if key not in ("handler", "out", "verbose")
    }
    manifest = {
        "command": options.command,
        "options": recorded,
        "seed": config.seed if config is not None else options.seed,
        "config": config.as_dict() if config is not None else None,
        "config_sha256": digest,
        "versions": {
            "tiny_nodule_detector": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def configure_logging(verbose: bool):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser(all_commands())
    try:
        options = parser.parse_args(argv)
    except ConfigError as error:
        configure_logging(False)
        logger.error(error.message)
        return 1
    except SystemExit as stop:
        # --help and --version
        return int(stop.code or 0)

    configure_logging(options.verbose)
    command: BaseCommand = options.handler
    try:
        config = command.load_config(options)
        options.out.mkdir(parents=True, exist_ok=True)
        write_manifest(options.out, options, config, command.config_digest(options, config))
        return command.handle(options, config, options.out)
    except VALIDATION_ERRORS as error:
        logger.error(error.message)
        return 1
    except Exception as error:
        logger.error(getattr(error, "message", None) or f"{type(error).__name__}: {error}")
        logger.debug("Traceback", exc_info=True)
        return 2


def main():
    sys.exit(run())
