from django.core.management.base import CommandError

from cli.base import RunConfigCommand, load_run_data
from core.exceptions import ConfigError
from evaluation.ablation import compare, run_ablation
from training.rundir import RunDir


class Command(RunConfigCommand):
    help = ("Train and evaluate every cell of an ablation grid over several seeds, "
            "one shared split per seed, and report mean ± std per cell.")

    extra_keys = ("grid", "seeds", "silhouette_by")

    def add_arguments(self, parser):
        super().add_arguments(parser)
        ablation = parser.add_argument_group("ablation")
        ablation.add_argument("--grid", help="projection, decoder or full")
        ablation.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
        ablation.add_argument("--silhouette-by", help="task or category")

    def run(self, **opts):
        run_config = self.load_run_config(opts)
        if run_config.train.setting != "joint_task":
            raise ConfigError("ablations compare models trained in the joint_task setting")
        task_spec, splits, d_f = load_run_data(run_config)

        snapshot = run_config.snapshot()
        run_dir = RunDir(run_config.run_dir) if run_config.run_dir else RunDir.for_config(snapshot)
        run_dir.write_config(snapshot)

        report = run_ablation(
            splits.train + splits.val + splits.test,
            task_spec,
            run_config.model_config(task_spec, d_f),
            run_config.train,
            run_config.seed_list(),
            grid=run_config.grid,
            fractions=run_config.fractions,
            silhouette_by=run_config.silhouette_by,
            run_dir=run_dir,
            workers=run_config.train.workers,
        )
        self.stdout.write(report.render())
        ranking = compare(report, "f1")
        if ranking:
            self.stdout.write("Ranking by overall F1: " + ", ".join(f"{name} {f1:.4f}" for name, f1 in ranking))

        failed = [run for run in report.runs if not run.ok]
        if failed:
            for run in failed:
                self.stderr.write(f"{run.cell.name} seed {run.seed}: {run.error}")
            raise CommandError(f"{len(failed)} of {len(report.runs)} cell runs failed; see {run_dir.root}")
        self.success(f"Ablation written to {run_dir.root}")
