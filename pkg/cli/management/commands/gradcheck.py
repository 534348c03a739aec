from django.core.management.base import CommandError

from cli.base import MecformerCommand
from evaluation.reports import format_table
from mecformer.verification import model_gradcheck, tiny_config
from tensor_core.gradcheck import DEFAULT_TOLERANCE, GradCheckReport, run_op_suite

SIZES = {"tiny": tiny_config}


class Command(MecformerCommand):
    help = "Finite-difference check of every differentiable op and of the full model's loss gradient."

    def add_arguments(self, parser):
        parser.add_argument("--size", choices=sorted(SIZES), default="tiny")
        parser.add_argument("--suite", choices=("all", "ops", "model"), default="all")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
        parser.add_argument("--max-entries", type=int, default=None,
                            help="perturb at most this many entries per parameter group")

    def run(self, **opts):
        report = GradCheckReport(tolerance=opts["tolerance"])
        if opts["suite"] in ("all", "ops"):
            report.extend(run_op_suite(opts["tolerance"], opts["seed"]))
        if opts["suite"] in ("all", "model"):
            for projection in ("ecn", "pt", "p1"):
                cfg = SIZES[opts["size"]](projection_kind=projection)
                sub = model_gradcheck(cfg, opts["seed"], opts["tolerance"], opts["max_entries"])
                for result in sub.results:
                    result.group = f"model[{projection}] / {result.group}"
                report.extend(sub)

        rows = [[r.group, f"{r.worst_relative_error:.3e}", str(r.entries), "ok" if r.passed else "FAIL"]
                for r in report.results]
        self.stdout.write(format_table(("Group", "Worst rel. error", "Entries", "Status"), rows))
        if not report.passed:
            names = ", ".join(r.group for r in report.failures)
            raise CommandError(f"{len(report.failures)} of {len(report.results)} gradient groups exceed "
                               f"{opts['tolerance']:g}: {names}")
        self.success(f"All {len(report.results)} gradient groups within {opts['tolerance']:g}")
