import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from rest_framework import serializers

from cli.management.commands.train import Command as TrainCommand
from cli.serializers import GenDataSerializer, RunConfigSerializer
from core.exceptions import NumericError
from core.serializers import build, format_errors
from data_pipeline.manifest import MANIFEST_NAME, read_manifest
from data_pipeline.taskspec import default_task_spec
from mecformer.checkpoint import load_model
from mecformer.serializers import ModelConfigSerializer
from tensor_core.ops import MatMul
from training.rundir import RunDir

SMALL_DATA = {
    "synthetic": {
        "d_f": 6, "bags_per_class": 4, "min_patches": 4, "max_patches": 8,
        "signal_fraction": 1.0, "noise": 0.1, "seed": 3,
    },
    "tasks": ["camelyon16", "brca"],
}
TINY_MODEL = ["--d-model", "8", "--heads", "2", "--layers", "1", "--landmarks", "4"]


def run(name, *args, **kwargs):
    out = StringIO()
    call_command(name, *args, stdout=out, stderr=StringIO(), **kwargs)
    return out.getvalue()


def write_json(path, data):
    Path(path).write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class CliTestCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.spec_path = write_json(cls.tmp / "small.json", SMALL_DATA)
        cls.data = str(cls.tmp / "data")
        cls.gen_output = run("gen_data", cls.spec_path, "--out", cls.data)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def fresh(self, name):
        path = self.tmp / self._testMethodName / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return str(path)


class SerializerTests(SimpleTestCase):
    def test_unknown_keys_and_field_errors_reported_together(self):
        serializer = GenDataSerializer(data={
            "synthetic": {"noise": -1, "bogus": 1},
            "fractions": [0.5, 0.5],
            "extra": True,
        })
        self.assertFalse(serializer.is_valid())
        self.assertEqual(set(serializer.errors), {"synthetic", "fractions", "extra"})
        self.assertEqual(set(serializer.errors["synthetic"]), {"noise", "bogus"})

    def test_cross_field_problem_from_config(self):
        with self.assertRaises(serializers.ValidationError) as ctx:
            build(ModelConfigSerializer, {"d_model": 7, "heads": 7})
        self.assertIn("must be even", format_errors(ctx.exception.detail))

    def test_derived_model_settings_rejected(self):
        serializer = RunConfigSerializer(data={"data_dir": "d", "model": {"vocab_size": 18}})
        self.assertFalse(serializer.is_valid())
        self.assertIn("vocab_size", serializer.errors["model"])

    def test_fractions_must_sum_to_one(self):
        serializer = GenDataSerializer(data={"fractions": [0.5, 0.3, 0.3]})
        self.assertFalse(serializer.is_valid())
        self.assertIn("sum to 1", str(serializer.errors["fractions"]))

    def test_inline_task_spec(self):
        config = build(GenDataSerializer, {
            "task_spec": {"tasks": [{"name": "x", "categories": [
                {"name": "a", "term": "alpha"}, {"name": "b", "term": "beta"}]}]},
        })
        self.assertEqual(config.task_spec.task_names, ("x",))
        self.assertEqual(config.task_spec.vocabulary.size, 4)

    def test_published_configuration_accepted(self):
        config = build(RunConfigSerializer, {
            "data_dir": "d",
            "model": {"d_model": 512, "heads": 8, "encoder_layers": 2, "decoder_layers": 2,
                      "gamma": 5, "beta": 5},
            "train": {"lr": 1e-5},
        })
        model_cfg = config.model_config(default_task_spec(), 768)
        self.assertEqual((model_cfg.d_model, model_cfg.heads, model_cfg.vocab_size), (512, 8, 18))
        self.assertEqual(config.train.lr, 1e-5)

    def test_flags_override_file_values(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json(Path(tmp) / "run.json", {
                "data_dir": "from-file", "model": {"d_model": 16}, "train": {"epochs": 5, "lr": 0.01},
            })
            config = TrainCommand().load_run_config({"config": path, "epochs": 2, "data_dir": "from-flag"})
        self.assertEqual(config.data_dir, "from-flag")
        self.assertEqual(config.train.epochs, 2)
        self.assertEqual(config.train.lr, 0.01)
        self.assertEqual(config.model, {"d_model": 16})

    def test_seed_list_counts_up_from_seed(self):
        config = build(RunConfigSerializer, {"data_dir": "d", "train": {"seed": 4}, "seeds": 3})
        self.assertEqual(config.seed_list(), [4, 5, 6])


class GenDataTests(CliTestCase):
    def test_manifest_has_one_row_per_bag(self):
        entries = read_manifest(Path(self.data) / MANIFEST_NAME)
        self.assertEqual(len(entries), 2 * 2 * 4)
        self.assertIn("Wrote 16 bags", self.gen_output)
        self.assertIn("vocabulary size: 10", self.gen_output)

    def test_same_spec_same_directory(self):
        other = self.fresh("again")
        run("gen_data", self.spec_path, "--out", other)
        self.assertEqual(tree_bytes(self.data), tree_bytes(other))

    def test_seed_flag_changes_data(self):
        other = self.fresh("seeded")
        run("gen_data", self.spec_path, "--out", other, "--seed", "4")
        self.assertNotEqual(tree_bytes(self.data), tree_bytes(other))

    def test_default_spec_reports_eighteen_words(self):
        spec = write_json(self.fresh("default.json"), {
            "synthetic": {"d_f": 4, "bags_per_class": 3, "min_patches": 2, "max_patches": 2},
        })
        output = run("gen_data", spec, "--out", self.fresh("default"))
        self.assertIn("vocabulary size: 18", output)
        self.assertIn("Tasks: 5, categories: 11", output)

    def test_refuses_non_empty_directory_without_force(self):
        out = Path(self.fresh("busy"))
        out.mkdir()
        (out / "notes.txt").write_text("keep me")
        with self.assertRaisesMessage(CommandError, "--force"):
            run("gen_data", self.spec_path, "--out", str(out))
        run("gen_data", self.spec_path, "--out", str(out), "--force")
        self.assertTrue((out / MANIFEST_NAME).exists())
        self.assertEqual((out / "notes.txt").read_text(), "keep me")

    def test_invalid_spec_lists_every_error(self):
        spec = write_json(self.fresh("bad.json"), {
            "synthetic": {"noise": -1, "bogus": 1}, "fractions": [0.5, 0.5],
        })
        with self.assertRaises(CommandError) as ctx:
            run("gen_data", spec, "--out", self.fresh("bad"))
        message = str(ctx.exception)
        for part in ("synthetic.noise", "synthetic.bogus", "fractions"):
            self.assertIn(part, message)

    def test_unknown_task(self):
        spec = write_json(self.fresh("bad.json"), {"tasks": ["nope"]})
        with self.assertRaisesMessage(CommandError, "unknown task"):
            run("gen_data", spec, "--out", self.fresh("bad"))


class TrainCommandTests(CliTestCase):
    def train(self, run_dir, *extra):
        return run("train", "--data", self.data, "--run-dir", run_dir, "--epochs", "1", *TINY_MODEL, *extra)

    def test_smoke_run_writes_loadable_checkpoint(self):
        run_dir = RunDir(self.fresh("run"))
        output = self.train(str(run_dir.root))
        self.assertIn("best epoch 1 of 1", output)
        model, metadata = load_model(run_dir.best_checkpoint())
        self.assertEqual(model.config.d_f, 6)
        self.assertEqual(model.config.vocab_size, 10)
        self.assertEqual(metadata["binding"]["setting"], "joint_task")
        self.assertEqual(len(run_dir.read_history()), 1)
        self.assertEqual(run_dir.read_config()["train"]["epochs"], 1)
        report = json.loads((run_dir.root / "report.json").read_text())
        self.assertEqual(set(report["tasks"]), {"camelyon16", "brca"})

    def test_projection_flag_selects_variant(self):
        run_dir = RunDir(self.fresh("run"))
        self.train(str(run_dir.root), "--projection", "p1")
        model, _ = load_model(run_dir.best_checkpoint())
        self.assertEqual(model.config.projection_kind, "p1")

    def test_replayed_config_reproduces_history(self):
        first = RunDir(self.fresh("first"))
        self.train(str(first.root), "--epochs", "2", "--patience", "5")
        second = RunDir(self.fresh("second"))
        run("train", "--config", str(first.config_path), "--run-dir", str(second.root))
        self.assertEqual(first.history_path.read_bytes(), second.history_path.read_bytes())
        self.assertEqual(first.best_checkpoint().read_bytes(), second.best_checkpoint().read_bytes())

    def test_invalid_configuration_rejected_before_work(self):
        run_dir = Path(self.fresh("run"))
        with self.assertRaises(CommandError) as ctx:
            self.train(str(run_dir), "--lr", "-1", "--heads", "0", "--optimizer", "sgd")
        message = str(ctx.exception)
        for part in ("train.lr", "train.optimizer", "model.heads"):
            self.assertIn(part, message)
        self.assertFalse(run_dir.exists())

    def test_unknown_key_in_config_file(self):
        config = write_json(self.fresh("run.json"), {"data_dir": self.data, "train": {"epochz": 3}})
        with self.assertRaisesMessage(CommandError, "train.epochz"):
            run("train", "--config", config)

    def test_individual_setting_trains_one_model_per_task(self):
        run_dir = RunDir(self.fresh("run"))
        self.train(str(run_dir.root), "--setting", "individual")
        for task in ("camelyon16", "brca"):
            model, metadata = load_model(run_dir.child(task).best_checkpoint())
            self.assertEqual(model.config.task_count, 1)
            self.assertEqual(metadata["binding"]["setting"], "individual")
        report = json.loads((run_dir.root / "report.json").read_text())
        self.assertEqual(set(report["tasks"]), {"camelyon16", "brca"})

    def test_d_f_setting_must_match_data(self):
        config = write_json(self.fresh("run.json"), {"data_dir": self.data, "model": {"d_f": 5}})
        with self.assertRaisesMessage(CommandError, "IngestionError"):
            run("train", "--config", config, "--run-dir", self.fresh("run"))


class TrainedModelTestCase(CliTestCase):
    """Shares one model overfit on the small dataset."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.run_dir = RunDir(cls.tmp / "overfit")
        run("train", "--data", cls.data, "--run-dir", str(cls.run_dir.root),
            "--optimizer", "adam", "--lr", "1e-2", "--epochs", "80", "--patience", "80",
            "--d-model", "16", "--heads", "2", "--layers", "1", "--exact-attention")
        cls.checkpoint = str(cls.run_dir.best_checkpoint())


class EvalCommandTests(TrainedModelTestCase):
    def test_overfit_model_is_perfect_on_training_split(self):
        output = run("eval", self.checkpoint, "--data", self.data, "--split", "train", "--format", "json")
        report = json.loads(output)
        for task in ("camelyon16", "brca"):
            self.assertEqual(report["tasks"][task]["accuracy"], 100.0)
            self.assertEqual(report["tasks"][task]["n_ood"], 0)
        self.assertAlmostEqual(report["overall"]["f1"], 1.0)

    def test_json_and_text_reports_agree(self):
        out = Path(self.fresh("report"))
        text = run("eval", self.checkpoint, "--data", self.data, "--out", str(out))
        data = json.loads(run("eval", self.checkpoint, "--data", self.data, "--format", "json"))
        self.assertEqual(json.loads((out / "report.json").read_text()), data)
        self.assertEqual((out / "report.txt").read_text(), text)
        self.assertIn(f"{data['overall']['f1']:.4f}", text)

    def test_ood_terms_listed_verbatim(self):
        with mock.patch("evaluation.predict.predict_term", return_value=("ductal tumor", False)):
            output = run("eval", self.checkpoint, "--data", self.data)
        self.assertIn("OOD terms for camelyon16: 'ductal tumor'", output)

    def test_d_f_mismatch(self):
        spec = write_json(self.fresh("wide.json"), {**SMALL_DATA, "synthetic": {**SMALL_DATA["synthetic"], "d_f": 5}})
        data = self.fresh("wide")
        run("gen_data", spec, "--out", data)
        with self.assertRaisesMessage(CommandError, "d_f=6"):
            run("eval", self.checkpoint, "--data", data)

    def test_task_spec_mismatch(self):
        spec = write_json(self.fresh("brca.json"), {**SMALL_DATA, "tasks": ["brca"]})
        data = self.fresh("brca")
        run("gen_data", spec, "--out", data)
        with self.assertRaisesMessage(CommandError, "IncompatibilityError"):
            run("eval", self.checkpoint, "--data", data)


class DecodeCommandTests(TrainedModelTestCase):
    def setUp(self):
        entry = next(e for e in read_manifest(Path(self.data) / MANIFEST_NAME)
                     if e.split == "train" and e.task == "brca")
        self.bag = str(Path(self.data) / entry.path)
        self.label = entry.label_term

    def test_decoding_is_deterministic(self):
        first = run("decode", self.checkpoint, self.bag, "--task", "brca")
        self.assertEqual(first, run("decode", self.checkpoint, self.bag, "--task", "1"))

    def test_trace_has_one_step_per_word_plus_eos(self):
        output = run("decode", self.checkpoint, self.bag, "--task", "brca", "--top-k", "2")
        lines = output.splitlines()
        self.assertEqual(lines[0], f"Term: {self.label!r}")
        self.assertEqual(lines[1], "Truncated: no")
        self.assertEqual(lines[2], f"Steps: {len(self.label.split()) + 1}")
        trace = lines[5:]
        self.assertEqual(len(trace), len(self.label.split()) + 1)
        self.assertIn("<EOS>", trace[-1])

    def test_task_out_of_range(self):
        with self.assertRaisesMessage(CommandError, "outside [0, 2)"):
            run("decode", self.checkpoint, self.bag, "--task", "2")

    def test_corrupt_label_is_a_command_error(self):
        corrupt = Path(self.fresh("corrupt.bag"))
        payload = bytearray(Path(self.bag).read_bytes())
        payload[24] = 0xFF
        corrupt.write_bytes(bytes(payload))
        with self.assertRaisesMessage(CommandError, "BagFormatError"):
            run("decode", self.checkpoint, str(corrupt), "--task", "brca")

    def test_task_is_required(self):
        with self.assertRaisesMessage(CommandError, "--task"):
            run("decode", self.checkpoint, self.bag)


class AblateCommandTests(CliTestCase):
    def ablate(self, run_dir, *extra):
        return run("ablate", "--data", self.data, "--run-dir", run_dir, "--epochs", "1", *TINY_MODEL, *extra)

    def test_projection_grid_over_three_seeds(self):
        run_dir = Path(self.fresh("run"))
        output = self.ablate(str(run_dir), "--grid", "projection", "--seeds", "3")
        report = json.loads((run_dir / "report.json").read_text())
        self.assertEqual(set(report["cells"]), {"p1-decoder", "pt-decoder", "ecn-decoder"})
        self.assertEqual(report["seeds"], [0, 1, 2])
        for cell in report["cells"].values():
            f1 = cell["metrics"]["overall"]["f1"]
            self.assertEqual(len(f1["values"]), 3)
            self.assertAlmostEqual(f1["std"], float(np.std(f1["values"])))
        self.assertIn("raw features", output)
        self.assertIn("±", output)

    def test_decoder_grid_has_two_cells(self):
        run_dir = Path(self.fresh("run"))
        self.ablate(str(run_dir), "--grid", "decoder", "--seeds", "1", "--silhouette-by", "category")
        report = json.loads((run_dir / "report.json").read_text())
        self.assertEqual(set(report["cells"]), {"ecn-decoder", "ecn-head"})
        self.assertEqual(report["silhouette_by"], "category")

    def test_failed_cells_are_reported(self):
        run_dir = Path(self.fresh("run"))
        with mock.patch("evaluation.ablation.train", side_effect=NumericError("diverged")):
            with self.assertLogs("evaluation.ablation", "ERROR"):
                with self.assertRaisesMessage(CommandError, "3 of 3 cell runs failed"):
                    self.ablate(str(run_dir), "--seeds", "1")
        report = json.loads((run_dir / "report.json").read_text())
        self.assertEqual(report["cells"]["ecn-decoder"]["errors"], {"0": "NumericError: diverged"})

    def test_unknown_grid(self):
        with self.assertRaisesMessage(CommandError, "grid"):
            self.ablate(self.fresh("run"), "--grid", "everything")

    def test_only_joint_task_setting(self):
        with self.assertRaisesMessage(CommandError, "joint_task"):
            self.ablate(self.fresh("run"), "--setting", "joint")


class GradcheckCommandTests(SimpleTestCase):
    def test_tiny_model_passes(self):
        output = run("gradcheck", "--size", "tiny", "--suite", "model", "--max-entries", "6")
        self.assertIn("All", output)
        self.assertIn("model[ecn] / projection.", output)
        self.assertIn("model[p1] / input", output)
        self.assertRegex(output, r"\d\.\d{3}e[-+]\d\d")

    def test_corrupted_backward_names_the_op(self):
        def wrong(self, grad):
            return grad @ np.swapaxes(self.b, -1, -2) * 2.0, np.swapaxes(self.a, -1, -2) @ grad

        with mock.patch.object(MatMul, "backward", wrong):
            with self.assertRaises(CommandError) as ctx:
                run("gradcheck", "--suite", "ops")
        self.assertIn("matmul", str(ctx.exception))
