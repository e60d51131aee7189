import logging
from dataclasses import replace
from pathlib import Path

from ..checkpoint import load_checkpoint
from ..data import preprocess, read_pgm, read_raw
from ..detector import NoduleDetector
from ..training import predict, stack_images
from . import BaseCommand

logger = logging.getLogger(__name__)


def format_detections(dets) -> str:
    return "".join(
        f"{d.cls} {d.confidence:.6f} {d.box.cx:.6f} {d.box.cy:.6f} {d.box.w:.6f} {d.box.h:.6f}\n" for d in dets
    )


class Command(BaseCommand):
    """Writes one detection file per input image"""

    name = "infer"
    help = "Detect nodules in .pgm images (or raw .raw planes, which are preprocessed first)"

    def add_arguments(self, parser):
        parser.add_argument("inputs", nargs="+", type=Path)
        parser.add_argument("--weights", type=Path, required=True, help="MSDT checkpoint")

    def handle(self, options, config, out):
        model = load_checkpoint(options.weights, NoduleDetector(config.model))
        # detections are reported at the operating confidence
        eval_cfg = replace(config.eval, conf_threshold=config.eval.score_threshold)
        for path in options.inputs:
            plane = preprocess(read_raw(path)) if path.suffix == ".raw" else read_pgm(path)
            (dets,) = predict(model, stack_images([plane], config.model.in_channels), eval_cfg)
            target = out / f"{path.stem}.txt"
            target.write_text(format_detections(dets))
            logger.info(f"{path}: {len(dets)} detection(s) -> {target}")
        return 0
