import numpy as np

from cli.base import MecformerCommand, load_checkpoint
from core.exceptions import ConfigError
from data_pipeline.bags import read_bag_file
from evaluation.reports import format_table
from tensor_core.tensor import no_grad


def top_k(logits: np.ndarray, k: int):
    order = np.argsort(-logits, kind="stable")[:k]
    return [(int(i), float(logits[i])) for i in order]


class Command(MecformerCommand):
    help = "Greedily decode one bag file and print the term with its step-by-step top-k trace."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint")
        parser.add_argument("bag", help="bag file")
        parser.add_argument("--task", required=True, help="task index or name the model is told")
        parser.add_argument("--top-k", type=int, default=3)

    def run(self, **opts):
        model, binding = load_checkpoint(opts["checkpoint"])
        task_spec = binding.task_spec
        t = self.task_index(opts["task"], task_spec)
        if opts["top_k"] < 1:
            raise ConfigError("--top-k must be at least 1")
        bag = read_bag_file(opts["bag"], expected_d_f=model.config.d_f)

        if not model.config.use_decoder:
            with no_grad():
                logits = model.classify_headonly(bag.tensor(), t).data
            ranked = top_k(logits, opts["top_k"])
            self.stdout.write(f"Term: {task_spec.category_from_global(ranked[0][0])[1]!r}")
            self.stdout.write("Top categories: " + ", ".join(
                f"{task_spec.category_from_global(i)[1]} {v:.4f}" for i, v in ranked))
            return

        vocabulary = task_spec.vocabulary
        generation = model.generate(bag.tensor(), t, vocabulary=vocabulary)
        rows = []
        for step, logits in enumerate(generation.step_logits, start=1):
            ranked = top_k(logits, opts["top_k"])
            rows.append([str(step), vocabulary.word_of(ranked[0][0]),
                         ", ".join(f"{vocabulary.word_of(i)} {v:.4f}" for i, v in ranked)])
        self.stdout.write(f"Term: {generation.term!r}")
        self.stdout.write(f"Truncated: {'yes' if generation.truncated else 'no'}")
        self.stdout.write(f"Steps: {generation.steps}")
        self.stdout.write(format_table(("Step", "Argmax", "Top-k logits"), rows))

    @staticmethod
    def task_index(value: str, task_spec) -> int:
        t = int(value) if value.lstrip("-").isdigit() else task_spec.task_index(value)
        if not 0 <= t < task_spec.task_count:
            raise ConfigError(f"--task {t} is outside [0, {task_spec.task_count})")
        return t
