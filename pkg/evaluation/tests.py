import json
import logging
import math
import tempfile
import time
from pathlib import Path
from unittest import mock, skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from sklearn.metrics import f1_score, silhouette_samples as sk_silhouette_samples, silhouette_score

from core.exceptions import ConfigError, ContractError, NumericError
from data_pipeline.bags import FeatureBag
from data_pipeline.splits import split_dataset
from data_pipeline.synthetic import SyntheticSpec, generate_synthetic
from data_pipeline.taskspec import Category, Task, TaskSpec, default_task_spec
from evaluation import ablation
from evaluation.ablation import Cell, compare, grid_cells, run_ablation
from evaluation.embeddings import (
    EmbeddingTable,
    export_embeddings,
    raw_feature_means,
    read_embeddings_csv,
    write_embeddings_csv,
)
from evaluation.metrics import (
    MetricReport,
    PredictionRecord,
    aggregate,
    classification_metrics,
    penalized_overall,
    report_from_records,
    resolve,
    summarize,
)
from evaluation.predict import evaluate, predict
from evaluation.reports import format_table, render_metric_report
from evaluation.silhouette import silhouette, silhouette_samples
from mecformer.config import ModelConfig
from mecformer.network import Generation, Mecformer
from mecformer.verification import tiny_config
from tensor_core.tensor import no_grad
from training.binding import TaskBinding
from training.config import TrainConfig
from training.loop import train
from training.rundir import RunDir
from training.seeding import derive_seed

logger = logging.getLogger(__name__)

BENCHMARK_CPU_SECONDS = 15 * 60

BINARY = ("normal tissue", "metastatic tumor")


def records(pairs, task="camelyon16", categories=BINARY):
    return [
        PredictionRecord(f"s{i}", task, true, pred, resolve(pred, categories))
        for i, (true, pred) in enumerate(pairs)
    ]


def small_spec():
    return TaskSpec([
        Task("colour", (Category("r", "red"), Category("b", "deep blue"))),
        Task("shape", (Category("c", "circle"), Category("s", "square"))),
    ])


class PenalizedOverallTests(SimpleTestCase):
    def test_no_ood_is_plain_mean(self):
        self.assertAlmostEqual(penalized_overall([0.8, 0.6], 2, 0), 0.7)

    def test_one_ood_category(self):
        self.assertAlmostEqual(penalized_overall([0.8, 0.6], 2, 1), 1.4 / 3)
        self.assertAlmostEqual(round(penalized_overall([0.8, 0.6], 2, 1), 4), 0.4667)

    def test_perfect(self):
        self.assertEqual(penalized_overall([1.0] * 5, 5, 0), 1.0)

    def test_two_ood_categories(self):
        self.assertAlmostEqual(penalized_overall([1.0, 1.0, 0.5], 3, 2), 0.5)

    def test_no_categories(self):
        with self.assertRaises(ContractError):
            penalized_overall([], 0, 0)

    def test_scores_must_match_categories(self):
        with self.assertRaises(ContractError):
            penalized_overall([0.5], 2, 0)


class ClassificationMetricsTests(SimpleTestCase):
    def test_all_correct(self):
        m = classification_metrics(records([(t, t) for t in BINARY * 3]), BINARY)
        self.assertEqual(m.accuracy, 100.0)
        for name in ("f1", "recall", "precision"):
            self.assertEqual(m.value(name), 1.0)
        self.assertEqual(m.n_ood, 0)

    def test_binary_confusion(self):
        tumor, normal = "metastatic tumor", "normal tissue"
        pairs = [(tumor, tumor)] * 3 + [(normal, tumor)] + [(tumor, normal)] + [(normal, normal)] * 5
        m = classification_metrics(records(pairs), BINARY)
        self.assertAlmostEqual(m.accuracy, 80.0)
        self.assertAlmostEqual(m.per_category[tumor].precision, 0.75)
        self.assertAlmostEqual(m.per_category[tumor].recall, 0.75)
        self.assertAlmostEqual(m.per_category[normal].precision, 5 / 6)
        self.assertAlmostEqual(m.per_category[normal].f1, 5 / 6)
        self.assertAlmostEqual(m.f1, (0.75 + 5 / 6) / 2)
        self.assertEqual(m.per_category[tumor].support, 4)

    def test_three_class_hand_values(self):
        cats = ("a", "b", "c")
        pairs = [("a", "a"), ("a", "b"), ("b", "b"), ("b", "b"), ("c", "c"), ("c", "a")]
        m = classification_metrics(records(pairs, "t", cats), cats)
        self.assertAlmostEqual(m.per_category["a"].f1, 0.5)
        self.assertAlmostEqual(m.per_category["b"].precision, 2 / 3)
        self.assertAlmostEqual(m.per_category["b"].f1, 0.8)
        self.assertAlmostEqual(m.per_category["c"].recall, 0.5)
        self.assertAlmostEqual(m.f1, (0.5 + 0.8 + 2 / 3) / 3)

    def test_single_ood_widens_denominator(self):
        normal, tumor = BINARY
        pairs = [(normal, normal)] * 3 + [(tumor, tumor)] * 2 + [(tumor, "tumor")]
        m = classification_metrics(records(pairs), BINARY)
        self.assertEqual(m.n_ood, 1)
        self.assertEqual(m.ood_terms, ["tumor"])
        self.assertAlmostEqual(m.accuracy, 500 / 6)
        self.assertAlmostEqual(m.f1, (1.0 + 0.8) / 3)
        self.assertAlmostEqual(m.recall, (1.0 + 2 / 3) / 3)
        self.assertAlmostEqual(m.precision, 2 / 3)

    def test_ood_counts_distinct_strings(self):
        normal, tumor = BINARY
        pairs = [(normal, "foo"), (normal, "foo"), (tumor, "bar"), (tumor, tumor), (normal, normal)]
        m = classification_metrics(records(pairs), BINARY)
        self.assertEqual(m.n_ood, 2)
        self.assertEqual(m.ood_terms, ["bar", "foo"])

    def test_never_predicted_category_scores_zero(self):
        normal, tumor = BINARY
        m = classification_metrics(records([(normal, normal), (tumor, normal)]), BINARY)
        self.assertEqual(m.per_category[tumor].precision, 0.0)
        self.assertEqual(m.per_category[tumor].f1, 0.0)

    def test_matches_macro_f1_without_ood(self):
        rng = np.random.default_rng(3)
        cats = ("a", "b", "c", "d")
        true = list(rng.choice(cats, size=60))
        pred = list(rng.choice(cats, size=60))
        m = classification_metrics(records(list(zip(true, pred)), "t", cats), cats)
        self.assertAlmostEqual(m.f1, f1_score(true, pred, labels=list(cats), average="macro", zero_division=0))

    def test_invariant_to_record_and_category_order(self):
        rng = np.random.default_rng(4)
        cats = ("a", "b", "c")
        pairs = list(zip(rng.choice(cats, size=30), rng.choice(cats + ("zzz",), size=30)))
        base = classification_metrics(records(pairs, "t", cats), cats)
        shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
        other = classification_metrics(records(shuffled, "t", cats), tuple(reversed(cats)))
        for name in ("accuracy", "f1", "recall", "precision"):
            self.assertAlmostEqual(base.value(name), other.value(name))

    def test_records_from_several_tasks(self):
        mixed = records([BINARY[:1] * 2]) + records([("a", "a")], "other", ("a",))
        with self.assertRaises(ContractError):
            classification_metrics(mixed, BINARY)


class ReportTests(SimpleTestCase):
    def test_report_groups_by_task_and_averages(self):
        spec = small_spec()
        recs = [
            PredictionRecord("1", "colour", "red", "red", "red"),
            PredictionRecord("2", "colour", "deep blue", "deep blue", "deep blue"),
            PredictionRecord("3", "shape", "circle", "circle", "circle"),
            PredictionRecord("4", "shape", "square", "circle", "circle"),
        ]
        report = report_from_records(recs, spec)
        self.assertEqual(list(report.tasks), ["colour", "shape"])
        self.assertAlmostEqual(report.overall("accuracy"), 75.0)
        data = json.loads(json.dumps(report.to_dict()))
        self.assertEqual(data["tasks"]["shape"]["n_categories"], 2)

    def test_merge_rejects_overlap(self):
        report = report_from_records([PredictionRecord("1", "colour", "red", "red", "red")], small_spec())
        with self.assertRaises(ContractError):
            report.merge(report)

    def test_summary_uses_population_std(self):
        s = summarize([1.0, 2.0, 3.0])
        self.assertEqual(s.mean, 2.0)
        self.assertAlmostEqual(s.std, math.sqrt(2 / 3))

    def test_aggregate_includes_overall(self):
        spec = small_spec()
        a = report_from_records([PredictionRecord("1", "colour", "red", "red", "red")], spec)
        b = report_from_records([PredictionRecord("1", "colour", "red", "blue", None)], spec)
        summary = aggregate([a, b])
        self.assertAlmostEqual(summary["colour"]["accuracy"].mean, 50.0)
        self.assertIn("overall", summary)

    def test_text_report_lists_ood_terms(self):
        report = MetricReport({"camelyon16": classification_metrics(
            records([(BINARY[0], "tumour"), (BINARY[1], BINARY[1])]), BINARY)})
        text = render_metric_report(report)
        self.assertIn("camelyon16", text)
        self.assertIn("overall", text)
        self.assertIn("'tumour'", text)

    def test_table_columns_align(self):
        lines = format_table(("Name", "Value"), [["a", "1.00"], ["longer", "10.00"]]).splitlines()
        self.assertEqual(len({len(line) for line in lines}), 1)


class SilhouetteTests(SimpleTestCase):
    def test_separated_clusters_approach_one(self):
        rng = np.random.default_rng(0)
        points = np.vstack([rng.normal(0, 1e-3, (10, 3)), rng.normal(100, 1e-3, (10, 3))])
        self.assertGreater(silhouette(points, [0] * 10 + [1] * 10), 0.999)

    def test_identical_points(self):
        self.assertEqual(silhouette(np.ones((4, 2)), [0, 0, 1, 1]), 0.0)

    def test_brute_force_six_points(self):
        points = np.array([[0, 0], [1, 0], [0, 1], [5, 5], [6, 5], [9, 9]], dtype=float)
        labels = [0, 0, 0, 1, 1, 1]
        expected = []
        for i, p in enumerate(points):
            same = [np.linalg.norm(p - q) for j, q in enumerate(points) if j != i and labels[j] == labels[i]]
            other = [np.linalg.norm(p - q) for j, q in enumerate(points) if labels[j] != labels[i]]
            a, b = np.mean(same), np.mean(other)
            expected.append((b - a) / max(a, b))
        self.assertAlmostEqual(silhouette(points, labels), np.mean(expected), places=12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(1)
        points = rng.normal(size=(30, 4))
        labels = rng.integers(0, 3, size=30)
        self.assertAlmostEqual(silhouette(points, labels), silhouette_score(points, labels), places=12)

    def test_singleton_cluster_scores_zero(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(7, 2))
        labels = np.array([0, 0, 0, 1, 1, 1, 2])
        samples = silhouette_samples(points, labels)
        self.assertEqual(samples[-1], 0.0)
        np.testing.assert_allclose(samples, sk_silhouette_samples(points, labels), atol=1e-12)

    def test_all_singletons(self):
        self.assertEqual(silhouette(np.eye(3), ["a", "b", "c"]), 0.0)

    def test_one_cluster(self):
        with self.assertRaises(ContractError):
            silhouette(np.eye(3), [1, 1, 1])

    def test_rigid_motion_and_scaling(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(20, 3))
        labels = rng.integers(0, 2, size=20)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        moved = 3.5 * points @ q + np.array([10.0, -2.0, 7.0])
        self.assertAlmostEqual(silhouette(points, labels), silhouette(moved, labels), places=10)


class EmbeddingTests(SimpleTestCase):
    def setUp(self):
        self.spec = small_spec()
        self.cfg = tiny_config(task_count=2, vocab_size=self.spec.vocabulary.size, category_count=4)
        self.model = Mecformer(self.cfg, seed=1)
        self.binding = TaskBinding(self.spec)
        self.rng = np.random.default_rng(0)

    def bag(self, features, task_id=0, term="red", slide_id="s"):
        return FeatureBag(slide_id, task_id, np.asarray(features, dtype=np.float32), term)

    def test_single_patch_is_projected_row(self):
        bag = self.bag(self.rng.normal(size=(1, 6)))
        table = export_embeddings(self.model, [bag], self.binding, self.spec)
        with no_grad():
            row = self.model.project(bag.tensor(), 0).data[0]
        np.testing.assert_allclose(table.matrix[0], row, atol=1e-12)
        self.assertEqual(table.tasks, ["colour"])

    def test_duplicated_patch_leaves_mean_unchanged(self):
        patch = self.rng.normal(size=(1, 6))
        once = export_embeddings(self.model, [self.bag(patch)], self.binding, self.spec)
        twice = export_embeddings(self.model, [self.bag(np.vstack([patch, patch]))], self.binding, self.spec)
        np.testing.assert_allclose(once.matrix, twice.matrix, atol=1e-12)

    def test_csv_round_trip(self):
        bags = [self.bag(self.rng.normal(size=(5, 6)), t, term, f"s{i}")
                for i, (t, term) in enumerate([(0, "red"), (1, "square"), (0, "deep blue")])]
        table = export_embeddings(self.model, bags, self.binding, self.spec)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_embeddings_csv(table, Path(tmp) / "emb.csv")
            header = path.read_text(encoding="utf-8").splitlines()[0]
            back = read_embeddings_csv(path)
        self.assertTrue(header.startswith("slide_id,task,label,v0"))
        self.assertEqual(back.slide_ids, table.slide_ids)
        self.assertEqual(back.labels, ["red", "square", "deep blue"])
        np.testing.assert_allclose(back.matrix, table.matrix, rtol=5e-9, atol=1e-12)

    def test_raw_feature_means(self):
        features = self.rng.normal(size=(4, 6))
        table = raw_feature_means([self.bag(features)], self.spec)
        np.testing.assert_allclose(table.matrix[0], features.astype(np.float32).mean(axis=0), rtol=1e-6)

    def test_grouping_labels(self):
        table = EmbeddingTable(["a", "b"], ["colour", "shape"], ["red", "circle"], np.zeros((2, 2)))
        self.assertEqual(table.labels_by("task"), ["colour", "shape"])
        self.assertEqual(table.labels_by("category"), ["colour/red", "shape/circle"])
        with self.assertRaises(ContractError):
            table.labels_by("colour")


class PredictTests(SimpleTestCase):
    def setUp(self):
        self.spec = small_spec()
        self.binding = TaskBinding(self.spec)
        rng = np.random.default_rng(0)
        self.bags = [
            FeatureBag("a", 0, rng.normal(size=(3, 6)), "red"),
            FeatureBag("b", 0, rng.normal(size=(3, 6)), "deep blue"),
            FeatureBag("c", 1, rng.normal(size=(3, 6)), "square"),
        ]

    def test_out_of_distribution_terms_are_flagged(self):
        model = Mecformer(tiny_config(vocab_size=self.spec.vocabulary.size), seed=0)
        outputs = iter([("red",), ("blue",), ("red",)])

        def fake_generate(x, t, vocabulary=None):
            return Generation([], False, [np.zeros(1)], next(outputs))

        with mock.patch.object(model, "generate", side_effect=fake_generate):
            recs = predict(model, self.binding, self.bags, self.spec)
        self.assertEqual([r.resolved_term for r in recs], ["red", None, None])
        # a valid term of another task is still out of distribution
        self.assertTrue(recs[2].is_ood)
        self.assertEqual(recs[2].task, "shape")

    def test_head_only_prediction_uses_global_category(self):
        cfg = tiny_config(vocab_size=self.spec.vocabulary.size, use_decoder=False)
        model = Mecformer(cfg, seed=0)
        model.head.weight.data[:] = 0.0
        model.head.bias.data[:] = [0.0, 0.0, 0.0, 5.0]
        report = evaluate(model, self.binding, self.bags, self.spec, workers=2)
        self.assertEqual(report.tasks["shape"].accuracy, 100.0)
        self.assertEqual(report.tasks["colour"].ood_terms, ["square"])

    def test_workers_do_not_change_results(self):
        model = Mecformer(tiny_config(vocab_size=self.spec.vocabulary.size), seed=3)
        serial = predict(model, self.binding, self.bags, self.spec)
        threaded = predict(model, self.binding, self.bags, self.spec, workers=3)
        self.assertEqual(serial, threaded)


class AblationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = small_spec()
        data = SyntheticSpec(d_f=6, bags_per_class=4, min_patches=3, max_patches=6, signal_fraction=0.5)
        cls.bags = generate_synthetic(data, cls.spec)
        cls.model_cfg = ModelConfig.for_task_spec(
            cls.spec, d_f=6, d_model=8, heads=2, encoder_layers=1, decoder_layers=1, max_decode_len=4,
        )
        cls.train_cfg = TrainConfig(epochs=1)

    def test_grids(self):
        self.assertEqual([c.name for c in grid_cells("projection")], ["p1-decoder", "pt-decoder", "ecn-decoder"])
        self.assertEqual(len(grid_cells("decoder")), 2)
        self.assertEqual(len(grid_cells("full")), 6)
        with self.assertRaises(ConfigError):
            grid_cells("everything")

    def test_cells_share_splits(self):
        report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, seeds=[0, 1], grid="projection")
        self.assertEqual(len(report.runs), 6)
        self.assertTrue(all(r.ok for r in report.runs))
        for run in report.runs:
            self.assertEqual(run.split_fingerprint, report.split_fingerprints[run.seed])
            self.assertIsNotNone(run.silhouette)
        self.assertEqual(set(report.raw_silhouette), {0, 1})
        self.assertIn("ecn-decoder", report.render())

    def test_single_cell_matches_plain_training(self):
        report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, seeds=[0], cells=[Cell("ecn")])
        splits = split_dataset(self.bags, seed=0)
        binding = TaskBinding(self.spec)
        model = Mecformer(self.model_cfg, seed=derive_seed(0, "init"))
        train(model, binding, splits.train, splits.val, self.train_cfg.evolve(seed=0))
        plain = evaluate(model, binding, splits.test, self.spec)
        self.assertEqual(report.runs[0].report.overall("f1"), plain.overall("f1"))

    def test_failing_cell_does_not_stop_the_others(self):
        real_train = train

        def flaky(model, *args, **kwargs):
            if model.config.projection_kind == "p1":
                raise NumericError("loss is nan")
            return real_train(model, *args, **kwargs)

        with mock.patch.object(ablation, "train", side_effect=flaky), self.assertLogs("evaluation.ablation", "ERROR"):
            report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, seeds=[0], workers=2)
        errors = {r.cell.name: r.error for r in report.runs}
        self.assertIn("NumericError", errors["p1-decoder"])
        self.assertIsNone(errors["ecn-decoder"])
        self.assertIn("p1-decoder", report.to_dict()["cells"])

    def test_decoder_grid_and_run_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            run_dir = RunDir(Path(tmp) / "ablation")
            report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, seeds=[0],
                                  grid="decoder", silhouette_by="category", run_dir=run_dir)
            data = json.loads((run_dir.root / "report.json").read_text(encoding="utf-8"))
            self.assertTrue((run_dir.root / "cells" / "ecn-head" / "seed_0" / "embeddings.csv").exists())
            self.assertTrue((run_dir.root / "raw_features_seed_0.csv").exists())
        self.assertEqual(set(data["cells"]), {"ecn-decoder", "ecn-head"})
        self.assertTrue(all(r.ok for r in report.runs))

    def test_bad_silhouette_grouping(self):
        with self.assertRaises(ConfigError):
            run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, seeds=[0], silhouette_by="slide")


@skipUnless(settings.MECFORMER_SLOW_TESTS, "set MECFORMER_SLOW_TESTS=1 to run the synthetic benchmark")
class SyntheticBenchmarkTests(SimpleTestCase):
    """Three tasks at desk scale; directions only, not published values."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        full = default_task_spec()
        cls.spec = TaskSpec([full.tasks[full.task_index(name)] for name in ("camelyon16", "brca", "nsclc")])
        data = SyntheticSpec(d_f=64, signal_fraction=0.15, bags_per_class=200, min_patches=50, max_patches=150)
        cls.bags = generate_synthetic(data, cls.spec)
        cls.model_cfg = ModelConfig.for_task_spec(cls.spec, d_f=64, d_model=64)
        cls.train_cfg = TrainConfig(epochs=30, patience=5)
        cls.seeds = [0, 1, 2]

    def test_joint_model_reaches_ninety_percent(self):
        started = time.process_time()
        splits = split_dataset(self.bags, seed=0)
        binding = TaskBinding(self.spec)
        model = Mecformer(self.model_cfg, seed=derive_seed(0, "init"))
        result = train(model, binding, splits.train, splits.val, self.train_cfg)
        report = evaluate(model, binding, splits.test, self.spec)
        cpu_seconds = time.process_time() - started
        logger.info("joint benchmark: %d epochs in %.0f CPU seconds; %s", len(result.history), cpu_seconds,
                    ", ".join(f"{name} {m.accuracy:.1f}%" for name, m in report.tasks.items()))
        self.assertLessEqual(cpu_seconds, BENCHMARK_CPU_SECONDS)
        for name, metrics in report.tasks.items():
            self.assertGreaterEqual(metrics.accuracy, 90.0, name)
            self.assertEqual(metrics.n_ood, 0, name)

    def test_expert_consultation_beats_baselines(self):
        report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, self.seeds, grid="projection")
        f1 = {name: value for name, value in compare(report, "f1")}
        self.assertGreaterEqual(f1["ecn-decoder"], f1["p1-decoder"])
        self.assertGreaterEqual(f1["ecn-decoder"], f1["pt-decoder"])
        ecn, single = (report.silhouette_summary(Cell(kind)) for kind in ("ecn", "p1"))
        self.assertGreater(ecn.mean, single.mean)

    def test_decoder_against_head_only(self):
        report = run_ablation(self.bags, self.spec, self.model_cfg, self.train_cfg, self.seeds, grid="decoder")
        per_seed = {
            cell.name: [r.report.overall("f1") for r in report.runs_for(cell)]
            for cell in report.cells()
        }
        self.assertTrue(all(len(values) == len(self.seeds) for values in per_seed.values()))
        decoder, head = (float(np.mean(per_seed[name])) for name in ("ecn-decoder", "ecn-head"))
        if decoder < head:
            logger.warning("decoder F1 %.4f below head-only %.4f; per seed %s", decoder, head, per_seed)
