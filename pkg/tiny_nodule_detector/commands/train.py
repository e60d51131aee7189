import logging
from pathlib import Path

from .. import Variant
from ..data import load_dataset
from ..detector import NoduleDetector
from ..metrics import format_metrics_table
from ..training import train
from . import BaseCommand

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """Trains a detector on a generated dataset"""

    name = "train"
    help = "Train on DATA/train.txt, validating on DATA/val.txt"

    def add_arguments(self, parser):
        parser.add_argument("--data", type=Path, required=True, help="Dataset directory written by gen-data")
        parser.add_argument("--variant", choices=[v.value for v in Variant], help="Ablation variant")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--lr", type=float)

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides["variant"] = options.variant
        overrides["train"] = {
            key: value
            for key, value in (("epochs", options.epochs), ("batch_size", options.batch_size), ("lr", options.lr))
            if value is not None
        }
        return overrides

    def handle(self, options, config, out):
        train_set = load_dataset(options.data / "train.txt")
        val_set = load_dataset(options.data / "val.txt")
        model = NoduleDetector(config.model, seed=config.train.seed)
        logger.info(
            f"Training {config.model.name} ({config.variant.value}) on {len(train_set)} scenes, "
            f"validating on {len(val_set)}"
        )
        result = train(model, train_set, val_set, config.train, out, config.augment, config.eval)
        print(format_metrics_table(result.metrics))
        return 0
