import json
import shutil
from collections import Counter
from pathlib import Path

from django.core.management.base import CommandError

from cli.base import MecformerCommand, read_json
from cli.serializers import GenDataSerializer
from core.serializers import build
from data_pipeline.manifest import BAG_DIR, MANIFEST_NAME, TASK_SPEC_NAME, save_dataset
from data_pipeline.splits import SPLIT_NAMES, split_dataset
from data_pipeline.synthetic import generate_synthetic
from evaluation.reports import format_table

GENERATION_NAME = "generation.json"


class Command(MecformerCommand):
    help = "Generate a synthetic multi-task dataset: bag files, a JSON-lines manifest and the task spec."

    def add_arguments(self, parser):
        parser.add_argument("spec", nargs="?", help="JSON generation spec (synthetic settings, task spec, fractions)")
        parser.add_argument("--out", required=True, help="output dataset directory")
        parser.add_argument("--seed", type=int, help="overrides synthetic.seed")
        parser.add_argument("--force", action="store_true", help="replace a dataset already in --out")

    def run(self, **opts):
        data = read_json(opts["spec"]) if opts.get("spec") else {}
        if opts.get("seed") is not None:
            data["synthetic"] = {**(data.get("synthetic") or {}), "seed": opts["seed"]}
        config = build(GenDataSerializer, data)

        out = Path(opts["out"])
        if out.exists() and any(out.iterdir()):
            if not opts["force"]:
                raise CommandError(f"{out} is not empty; pass --force to replace the dataset in it")
            # only what a previous run wrote
            shutil.rmtree(out / BAG_DIR, ignore_errors=True)
            for name in (MANIFEST_NAME, TASK_SPEC_NAME, GENERATION_NAME):
                (out / name).unlink(missing_ok=True)

        bags = generate_synthetic(config.synthetic, config.task_spec)
        splits = split_dataset(bags, config.fractions, seed=config.effective_split_seed)
        save_dataset(out, splits, config.task_spec)
        (out / GENERATION_NAME).write_text(json.dumps(config.snapshot(), sort_keys=True, indent=2) + "\n",
                                           encoding="utf-8")

        task_spec = config.task_spec
        counts = Counter((bag.task_id, bag.label_term, name) for name in SPLIT_NAMES for bag in splits[name])
        rows = []
        for t, task in enumerate(task_spec.tasks):
            for category in task.categories:
                per_split = [counts[(t, category.term, name)] for name in SPLIT_NAMES]
                rows.append([f"{task.name}/{category.name}", *map(str, per_split), str(sum(per_split))])
        self.stdout.write(format_table(("Category", *SPLIT_NAMES, "total"), rows))
        self.stdout.write(f"Tasks: {task_spec.task_count}, categories: {task_spec.category_count}, "
                          f"vocabulary size: {task_spec.vocabulary.size}, d_f: {config.synthetic.d_f}")
        self.success(f"Wrote {len(bags)} bags to {out}")
