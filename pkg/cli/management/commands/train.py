from cli.base import RunConfigCommand, load_run_data
from evaluation.metrics import MetricReport
from evaluation.predict import evaluate
from evaluation.reports import render_metric_report
from mecformer.network import Mecformer
from training.binding import bindings_for
from training.loop import train
from training.rundir import RunDir
from training.seeding import derive_seed


class Command(RunConfigCommand):
    help = ("Train on a dataset directory. Writes config.json, history.jsonl, the best checkpoint "
            "and a validation report into the run directory.")

    def run(self, **opts):
        run_config = self.load_run_config(opts)
        cfg = run_config.train
        task_spec, splits, d_f = load_run_data(run_config)

        snapshot = run_config.snapshot()
        run_dir = RunDir(run_config.run_dir) if run_config.run_dir else RunDir.for_config(snapshot)
        run_dir.write_config(snapshot)

        bindings = bindings_for(cfg.setting, task_spec)
        report = MetricReport()
        for binding in bindings:
            target = run_dir if len(bindings) == 1 else run_dir.child(binding.label)
            model = Mecformer(run_config.model_config(binding.task_spec, d_f), seed=derive_seed(cfg.seed, "init"))
            result = train(model, binding, splits.train, splits.val, cfg, target)
            self.success(f"{binding.label}: best epoch {result.best_epoch} of {len(result.history)}, "
                         f"validation loss {result.best_val_loss:.6f}")
            self.stdout.write(f"Best checkpoint: {result.best_checkpoint}")

            if binding.select(splits.val):
                part = evaluate(model, binding, splits.val, task_spec, cfg.workers)
                if target is not run_dir:
                    target.write_report(part.to_dict(), render_metric_report(part))
                report = report.merge(part)

        if report.tasks:
            text = render_metric_report(report)
            run_dir.write_report(report.to_dict(), text)
            self.stdout.write(text)
        else:
            self.stdout.write(self.style.WARNING("No validation bags; no metric report written."))
        self.success(f"Run directory: {run_dir.root}")
