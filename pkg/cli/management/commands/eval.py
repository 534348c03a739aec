from django.conf import settings

from cli.base import MecformerCommand, check_d_f, load_checkpoint
from core.exceptions import ContractError
from data_pipeline.manifest import load_dataset
from data_pipeline.splits import SPLIT_NAMES
from evaluation.predict import evaluate
from evaluation.reports import render_metric_report, to_json
from training.rundir import RunDir


class Command(MecformerCommand):
    help = "Evaluate a checkpoint on one split of a dataset: per-task metrics, penalized overall and OOD terms."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint")
        parser.add_argument("--data", required=True, help="dataset directory written by gen_data")
        parser.add_argument("--split", choices=SPLIT_NAMES, default="test")
        parser.add_argument("--format", choices=("text", "json"), default="text")
        parser.add_argument("--out", help="also write report.json and report.txt into this directory")
        parser.add_argument("--workers", type=int, default=None)

    def run(self, **opts):
        task_spec, splits = load_dataset(opts["data"])
        model, binding = load_checkpoint(opts["checkpoint"], task_spec)
        bags = splits[opts["split"]]
        check_d_f(model, bags, opts["data"])
        if not binding.select(bags):
            raise ContractError(f"the {opts['split']} split has no bags for {binding.label}")

        workers = opts["workers"] or settings.MECFORMER_WORKERS
        report = evaluate(model, binding, bags, task_spec, workers)
        text = render_metric_report(report)
        if opts["out"]:
            RunDir(opts["out"]).write_report(report.to_dict(), text)
        self.stdout.write(to_json(report.to_dict()) if opts["format"] == "json" else text)
