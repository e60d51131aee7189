import argparse
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from ..config import RunConfig, load_run_config

logger = logging.getLogger(__name__)


class BaseCommand:
    """
    One CLI subcommand.

    Subclasses set `name` and `help`, declare their own flags in `add_arguments` and
    do the work in `handle`, which returns the process exit code.
    """

    name = ""
    help = ""
    # False when --config names something other than a run config
    uses_run_config = True

    def add_arguments(self, parser: argparse.ArgumentParser):
        pass

    def config_overrides(self, options: argparse.Namespace) -> Dict[str, Any]:
        """Flag values layered over the config file, in the file's shape."""
        return {
            "seed": options.seed,
            "profile": options.profile,
            "eval": {
                key: value
                for key, value in (("score_threshold", options.threshold), ("iou_nms", options.iou_nms))
                if value is not None
            },
        }

    def load_config(self, options: argparse.Namespace) -> Optional[RunConfig]:
        if not self.uses_run_config:
            return None
        return load_run_config(options.config, self.config_overrides(options))

    def config_digest(self, options: argparse.Namespace, config: Optional[RunConfig]) -> Optional[str]:
        return config.digest() if config is not None else None

    def handle(self, options: argparse.Namespace, config: Optional[RunConfig], out: Path) -> int:
        raise NotImplementedError


def all_commands():
    from . import analyze, evaluate, gen_data, gradcheck, infer, preprocess, train

    return [module.Command() for module in (gen_data, preprocess, analyze, gradcheck, train, evaluate, infer)]
