import logging
from pathlib import Path

from ..checkpoint import load_checkpoint
from ..data import load_dataset
from ..detector import NoduleDetector
from ..metrics import format_metrics_table, write_metrics_csv
from ..training import evaluate_model
from . import BaseCommand

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """Scores a checkpoint on a labelled manifest"""

    name = "eval"
    help = "Compute precision, recall, F1, AP and mAP of a checkpoint"

    def add_arguments(self, parser):
        parser.add_argument("--data", type=Path, required=True, help="Manifest of image/label pairs")
        parser.add_argument("--weights", type=Path, required=True, help="MSDT checkpoint")

    def handle(self, options, config, out):
        model = load_checkpoint(options.weights, NoduleDetector(config.model))
        metrics = evaluate_model(model, load_dataset(options.data), config.eval)
        with open(out / "metrics.csv", "w", newline="") as handle:
            write_metrics_csv(metrics, handle)
        print(format_metrics_table(metrics))
        return 0
