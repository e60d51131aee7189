import logging

from ..data import generate_dataset
from . import BaseCommand

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """Generates a synthetic CT-slice dataset with train and val manifests"""

    name = "gen-data"
    help = "Generate synthetic scenes with nodule labels"

    def add_arguments(self, parser):
        parser.add_argument("--count", type=int, default=300, help="Number of scenes")
        parser.add_argument("--val-fraction", type=float, default=0.2, help="Share of scenes in val.txt")

    def handle(self, options, config, out):
        train, val = generate_dataset(out, config.scene, options.count, options.val_fraction)
        print(f"{len(train)} train / {len(val)} val scenes in {out}")
        return 0
