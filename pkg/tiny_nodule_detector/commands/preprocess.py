import logging
from pathlib import Path

from ..data import HU_WINDOW, preprocess, read_raw, write_pgm
from . import BaseCommand

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """Turns raw 16-bit HU planes into masked 8-bit images"""

    name = "preprocess"
    help = "Clip, normalize and lung-mask raw HU planes"

    def add_arguments(self, parser):
        parser.add_argument("inputs", nargs="+", type=Path, help="Raw planes (.raw)")
        parser.add_argument(
            "--hu-window",
            action="store_true",
            help=f"Truncate to the lung window {HU_WINDOW[0]}..{HU_WINDOW[1]} HU before clipping",
        )

    def handle(self, options, config, out):
        window = HU_WINDOW if options.hu_window else None
        for path in options.inputs:
            target = out / f"{path.stem}.pgm"
            write_pgm(target, preprocess(read_raw(path), hu_window=window))
            logger.info(f"{path} -> {target}")
        return 0
