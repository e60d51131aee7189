import hashlib
import logging

from .. import Profile
from ..analysis import (
    compose_rf,
    describe_architecture,
    format_report_table,
    format_shape_table,
    load_arch,
    trace_shapes,
    write_report_csv,
)
from ..detector import ModelConfig
from ..exceptions import ConfigError
from . import BaseCommand

logger = logging.getLogger(__name__)

DEFAULT_SIZES = {Profile.DESK: 96, Profile.PAPER_640: 640}


class Command(BaseCommand):
    """Prints the shape trace and receptive-field report of an architecture"""

    name = "analyze"
    help = "Trace feature-map shapes and receptive fields of an .arch file or a profile"
    uses_run_config = False

    def add_arguments(self, parser):
        parser.add_argument("--size", type=int, help="Input side length when analyzing a profile")
        parser.add_argument(
            "--targets", type=float, nargs="*", default=(), help="Tiny-target sizes (px) to check for collapse"
        )

    def config_digest(self, options, config):
        if options.config is None:
            return None
        if not options.config.is_file():
            raise ConfigError(f"Config file {options.config} does not exist")
        return hashlib.sha256(options.config.read_bytes()).hexdigest()

    def _arch(self, options):
        if options.config is not None:
            arch = load_arch(options.config)
            if options.targets:
                arch.target_sizes = tuple(options.targets)
            return arch
        profile = Profile(options.profile or Profile.DESK)
        size = options.size or DEFAULT_SIZES[profile]
        return describe_architecture(ModelConfig.for_profile(profile), size, options.targets)

    def handle(self, options, config, out):
        arch = self._arch(options)
        shapes = trace_shapes(arch)
        report = compose_rf(arch)
        print(format_shape_table(shapes))
        print()
        print(format_report_table(report))
        with open(out / "rf_report.csv", "w", newline="") as handle:
            write_report_csv(report, handle)
        return 0
