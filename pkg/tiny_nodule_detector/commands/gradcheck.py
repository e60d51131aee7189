import csv
import logging

from ..exceptions import ConfigError, GradcheckError
from ..gradcheck import REGISTRY, run_all
from . import BaseCommand

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    """Runs the finite-difference gradient checks"""

    name = "gradcheck"
    help = "Compare autodiff gradients with central differences"

    def add_arguments(self, parser):
        parser.add_argument("checks", nargs="*", help=f"Checks to run, from: {', '.join(REGISTRY)}")
        parser.add_argument("--all", action="store_true", help="Run every registered check")

    def handle(self, options, config, out):
        if not options.all and not options.checks:
            raise ConfigError("Name at least one check or pass --all")
        try:
            results = run_all(None if options.all else options.checks)
        except KeyError as error:
            raise ConfigError(error.args[0]) from None
        with open(out / "gradcheck.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["check", "max_rel_error", "checked", "passed"])
            for name, report in results.items():
                writer.writerow([name, f"{report.max_rel_error:.3e}", report.checked, int(report.passed)])
        width = max(len(name) for name in results)
        for name, report in results.items():
            print(f"{name.ljust(width)}  {report.max_rel_error:.2e}  {'ok' if report.passed else 'FAILED'}")
        failed = [name for name, report in results.items() if not report.passed]
        if failed:
            raise GradcheckError(f"{len(failed)} of {len(results)} gradient checks failed: {', '.join(failed)}")
        return 0
