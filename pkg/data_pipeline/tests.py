import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.constants import BOS_ID, EOS_ID
from core.exceptions import (
    BadMagicError,
    BagFormatError,
    ConfigError,
    DimensionError,
    IngestionError,
    ShapeOverflowError,
    SplitError,
    TruncatedPayloadError,
    VocabularyError,
)
from data_pipeline.bags import FeatureBag, read_bag_file, write_bag_file
from data_pipeline.manifest import MANIFEST_NAME, load_dataset, read_manifest, save_dataset
from data_pipeline.splits import Splits, merge, split_dataset
from data_pipeline.synthetic import SyntheticSpec, class_prototypes, generate_synthetic
from data_pipeline.taskspec import Category, Task, TaskSpec, Vocabulary, default_task_spec


def two_task_spec():
    return TaskSpec([
        Task("brca", (Category("idc", "ductal carcinoma"), Category("ilc", "lobular carcinoma"))),
        Task("camelyon16", (Category("normal", "normal tissue"), Category("tumor", "metastatic tumor"))),
    ])


class VocabularyTests(SimpleTestCase):
    def test_reserved_tokens_first(self):
        vocab = Vocabulary(["red", "blue", "red"])
        self.assertEqual(vocab.words, ("<BOS>", "<EOS>", "red", "blue"))
        self.assertEqual((vocab.id_of("<BOS>"), vocab.id_of("<EOS>")), (BOS_ID, EOS_ID))

    def test_unknown_word_is_named(self):
        with self.assertRaisesMessage(VocabularyError, "'green'"):
            Vocabulary(["red"]).id_of("green")

    def test_unknown_id(self):
        with self.assertRaises(VocabularyError):
            Vocabulary(["red"]).word_of(3)


class TaskSpecTests(SimpleTestCase):
    def setUp(self):
        self.spec = two_task_spec()

    def test_round_trip(self):
        ids = self.spec.tokenize("ductal carcinoma")
        self.assertEqual(len(ids), 2)
        self.assertEqual(self.spec.detokenize(ids), "ductal carcinoma")

    def test_empty_term(self):
        self.assertEqual(self.spec.tokenize(""), [])
        self.assertEqual(self.spec.detokenize([]), "")
        with self.assertRaises(VocabularyError):
            self.spec.target_ids("")

    def test_targets_are_wrapped(self):
        ids = self.spec.target_ids("metastatic tumor")
        self.assertEqual(ids[0], BOS_ID)
        self.assertEqual(ids[-1], EOS_ID)
        self.assertEqual(len(ids), 4)

    def test_unknown_word(self):
        with self.assertRaisesMessage(VocabularyError, "'benign'"):
            self.spec.tokenize("benign tissue")

    def test_default_spec_has_eighteen_entries(self):
        spec = default_task_spec()
        self.assertEqual(spec.vocabulary.size, 18)
        self.assertEqual(spec.task_count, 5)
        self.assertEqual(spec.category_count, 11)

    def test_shared_words_get_one_id(self):
        self.assertEqual(self.spec.vocabulary.size, 2 + 7)

    def test_global_category_indices(self):
        self.assertEqual(self.spec.global_category(1, "metastatic tumor"), 3)
        self.assertEqual(self.spec.category_from_global(2), (1, "normal tissue"))
        with self.assertRaises(VocabularyError):
            self.spec.category_from_global(4)

    def test_prefix_terms_rejected(self):
        with self.assertRaisesMessage(ConfigError, "prefix"):
            TaskSpec([Task("t", (Category("a", "renal carcinoma"), Category("b", "renal")))])

    def test_prefix_across_tasks_allowed(self):
        TaskSpec([Task("a", (Category("x", "renal"),)), Task("b", (Category("y", "renal carcinoma"),))])

    def test_invalid_specs(self):
        cases = [
            [],
            [Task("t", ())],
            [Task("t", (Category("a", "x"),)), Task("t", (Category("b", "y"),))],
            [Task("t", (Category("a", "  "),))],
            [Task("t", (Category("a", "<EOS>"),))],
        ]
        for tasks in cases:
            with self.assertRaises(ConfigError):
                TaskSpec(tasks)

    def test_json_round_trip_preserves_ids(self):
        with tempfile.TemporaryDirectory() as tmp:
            loaded = TaskSpec.load(self.spec.save(Path(tmp) / "spec.json"))
        self.assertEqual(loaded, self.spec)
        self.assertEqual(loaded.vocabulary.words, self.spec.vocabulary.words)

    def test_malformed_json(self):
        with self.assertRaises(ConfigError):
            TaskSpec.from_dict({"tasks": [{"name": "t"}]})

    def test_merged_and_single(self):
        merged = self.spec.merged()
        self.assertEqual(merged.task_count, 1)
        self.assertEqual(merged.terms(0), self.spec.terms(0) + self.spec.terms(1))
        self.assertEqual(self.spec.single(1).terms(0), self.spec.terms(1))


class FeatureBagTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "slide.bag"
        rng = np.random.default_rng(0)
        self.bag = FeatureBag("slide-α", 1, rng.normal(size=(7, 5)), "metastatic tumor")

    def test_round_trip_is_bit_exact(self):
        write_bag_file(self.bag, self.path)
        back = read_bag_file(self.path)
        self.assertTrue(back.same_as(self.bag))
        self.assertEqual(back.features.dtype, np.float32)

    def test_features_are_read_only(self):
        with self.assertRaises(ValueError):
            self.bag.features[0, 0] = 1.0

    def test_empty_bag_rejected(self):
        with self.assertRaises(DimensionError):
            FeatureBag("s", 0, np.zeros((0, 4)), "red")

    def test_bad_magic(self):
        write_bag_file(self.bag, self.path)
        self.path.write_bytes(b"MECX" + self.path.read_bytes()[4:])
        with self.assertRaises(BadMagicError):
            read_bag_file(self.path)

    def test_truncated(self):
        write_bag_file(self.bag, self.path)
        self.path.write_bytes(self.path.read_bytes()[:-1])
        with self.assertRaises(TruncatedPayloadError):
            read_bag_file(self.path)

    def test_trailing_bytes(self):
        write_bag_file(self.bag, self.path)
        self.path.write_bytes(self.path.read_bytes() + b"\0")
        with self.assertRaises(BagFormatError):
            read_bag_file(self.path)

    def test_invalid_utf8_label(self):
        write_bag_file(self.bag, self.path)
        payload = bytearray(self.path.read_bytes())
        payload[24] = 0xFF
        self.path.write_bytes(bytes(payload))
        with self.assertRaisesMessage(BagFormatError, "label at offset 20 is not valid UTF-8"):
            read_bag_file(self.path)

    def test_invalid_utf8_slide_id(self):
        write_bag_file(self.bag, self.path)
        payload = bytearray(self.path.read_bytes())
        slide_start = 24 + len(self.bag.label_term.encode("utf-8")) + 4
        payload[slide_start] = 0xC3
        payload[slide_start + 1] = 0x28
        self.path.write_bytes(bytes(payload))
        with self.assertRaisesMessage(BagFormatError, "slide id"):
            read_bag_file(self.path)

    def test_shape_overflow(self):
        write_bag_file(self.bag, self.path)
        payload = bytearray(self.path.read_bytes())
        payload[8:12] = (2 ** 31).to_bytes(4, "little")
        self.path.write_bytes(bytes(payload))
        with self.assertRaises(ShapeOverflowError):
            read_bag_file(self.path)

    def test_d_f_mismatch_names_both_values(self):
        write_bag_file(self.bag, self.path)
        with self.assertRaises(IngestionError) as ctx:
            read_bag_file(self.path, expected_d_f=64)
        self.assertIn("d_f=5", str(ctx.exception))
        self.assertIn("d_f=64", str(ctx.exception))

    def test_check_against_spec(self):
        self.bag.check_against(two_task_spec())
        with self.assertRaises(VocabularyError):
            FeatureBag("s", 0, np.ones((1, 2)), "metastatic tumor").check_against(two_task_spec())
        with self.assertRaises(IngestionError):
            FeatureBag("s", 5, np.ones((1, 2)), "red").check_against(two_task_spec())


class SyntheticTests(SimpleTestCase):
    def setUp(self):
        self.spec = two_task_spec()

    def test_noise_free_signal_only(self):
        synthetic = SyntheticSpec(d_f=8, signal_fraction=1.0, noise=0.0, bags_per_class=2, min_patches=3, max_patches=5)
        prototypes = class_prototypes(synthetic, self.spec)
        for bag in generate_synthetic(synthetic, self.spec):
            prototype = prototypes[self.spec.global_category(bag.task_id, bag.label_term)]
            np.testing.assert_array_equal(bag.features, np.tile(prototype.astype(np.float32), (bag.n_patches, 1)))

    def test_same_seed_same_bytes(self):
        synthetic = SyntheticSpec(d_f=8, bags_per_class=3, min_patches=4, max_patches=9, seed=11)
        a = generate_synthetic(synthetic, self.spec)
        b = generate_synthetic(synthetic, self.spec)
        self.assertTrue(all(x.same_as(y) for x, y in zip(a, b)))
        c = generate_synthetic(SyntheticSpec(d_f=8, bags_per_class=3, min_patches=4, max_patches=9, seed=12), self.spec)
        self.assertFalse(all(x.same_as(y) for x, y in zip(a, c)))

    def test_class_balance_and_patch_range(self):
        synthetic = SyntheticSpec(d_f=4, bags_per_class=5, min_patches=10, max_patches=20)
        bags = generate_synthetic(synthetic, self.spec)
        self.assertEqual(len(bags), 5 * self.spec.category_count)
        for t in range(self.spec.task_count):
            terms = [b.label_term for b in bags if b.task_id == t]
            self.assertEqual({terms.count(term) for term in self.spec.terms(t)}, {5})
        self.assertTrue(all(10 <= b.n_patches <= 20 for b in bags))

    def test_signal_count_rounds_up(self):
        synthetic = SyntheticSpec(signal_fraction=0.1)
        self.assertEqual(synthetic.signal_patches(50), 5)
        self.assertEqual(synthetic.signal_patches(51), 6)
        self.assertEqual(synthetic.signal_patches(3), 1)

    def test_extractor_presets(self):
        self.assertEqual(SyntheticSpec().d_f, 64)
        self.assertEqual(SyntheticSpec(extractor="ctranspath").d_f, 768)
        self.assertEqual(SyntheticSpec(extractor="uni").d_f, 1024)
        self.assertEqual(SyntheticSpec(extractor="uni", d_f=12).d_f, 12)

    def test_invalid_spec(self):
        with self.assertRaises(ConfigError) as ctx:
            SyntheticSpec(signal_fraction=0.0, min_patches=10, max_patches=5)
        self.assertIn("signal_fraction", str(ctx.exception))
        self.assertIn("patch range", str(ctx.exception))
        with self.assertRaises(ConfigError):
            SyntheticSpec(extractor="resnet")

    def test_nearest_prototype_beats_chance(self):
        synthetic = SyntheticSpec(d_f=64, signal_fraction=0.1, noise=1.0, bags_per_class=20, seed=3)
        prototypes = class_prototypes(synthetic, self.spec)
        correct = 0
        bags = generate_synthetic(synthetic, self.spec)
        for bag in bags:
            pooled = bag.features.astype(np.float64).mean(axis=0)
            candidates = [self.spec.global_category(bag.task_id, term) for term in self.spec.terms(bag.task_id)]
            distances = [np.linalg.norm(pooled - synthetic.signal_fraction * prototypes[c]) for c in candidates]
            predicted = self.spec.terms(bag.task_id)[int(np.argmin(distances))]
            correct += predicted == bag.label_term
        self.assertGreater(correct / len(bags), 0.8)


class SplitTests(SimpleTestCase):
    def setUp(self):
        self.spec = two_task_spec()
        self.bags = generate_synthetic(SyntheticSpec(d_f=4, bags_per_class=20, min_patches=2, max_patches=3), self.spec)

    def test_cells_are_disjoint_and_cover(self):
        splits = split_dataset(self.bags, seed=0)
        ids = [b.slide_id for name in ("train", "val", "test") for b in splits[name]]
        self.assertEqual(len(ids), len(set(ids)))
        self.assertEqual(set(ids), {b.slide_id for b in self.bags})

    def test_default_fractions_per_category(self):
        splits = split_dataset(self.bags, seed=0)
        for name, expected in (("train", 12), ("val", 3), ("test", 5)):
            for t in range(self.spec.task_count):
                for term in self.spec.terms(t):
                    count = sum(1 for b in splits[name] if b.task_id == t and b.label_term == term)
                    self.assertLessEqual(abs(count - expected), 1)

    def test_all_train(self):
        splits = split_dataset(self.bags, (1.0, 0.0, 0.0), seed=0)
        self.assertEqual((len(splits.train), len(splits.val), len(splits.test)), (len(self.bags), 0, 0))

    def test_seeds_give_distinct_partitions(self):
        prints = {split_dataset(self.bags, seed=s).fingerprint() for s in (0, 1, 2)}
        self.assertEqual(len(prints), 3)
        self.assertEqual(split_dataset(self.bags, seed=1).fingerprint(), split_dataset(self.bags, seed=1).fingerprint())

    def test_small_category(self):
        bags = [FeatureBag(f"s{i}", 0, np.ones((1, 2)), "ductal carcinoma") for i in range(2)]
        with self.assertRaisesMessage(SplitError, "ductal carcinoma"):
            split_dataset(bags)

    def test_bad_fractions(self):
        with self.assertRaises(ConfigError):
            split_dataset(self.bags, (0.5, 0.5, 0.5))

    def test_per_task_then_merge_keeps_task_ids(self):
        splits = split_dataset(self.bags, seed=4)
        per_task = [splits.for_task(t) for t in range(self.spec.task_count)]
        self.assertEqual({b.task_id for b in per_task[1].train}, {1})
        merged = merge(per_task)
        self.assertEqual(merged.fingerprint(), splits.fingerprint())

    def test_assignment_covers_every_bag_once(self):
        assignment = split_dataset(self.bags, seed=2).assignment()
        self.assertEqual(set(assignment), {b.slide_id for b in self.bags})
        self.assertLessEqual(set(assignment.values()), {"train", "val", "test"})

    def test_unknown_split_name(self):
        with self.assertRaises(KeyError):
            Splits()["holdout"]


class ManifestTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name) / "data"
        self.spec = two_task_spec()
        bags = generate_synthetic(SyntheticSpec(d_f=4, bags_per_class=4, min_patches=2, max_patches=3), self.spec)
        self.splits = split_dataset(bags, seed=0)

    def test_dataset_round_trip(self):
        save_dataset(self.root, self.splits, self.spec)
        spec, splits = load_dataset(self.root, expected_d_f=4)
        self.assertEqual(spec, self.spec)
        self.assertEqual(splits.fingerprint(), self.splits.fingerprint())
        original = {b.slide_id: b for b in self.splits.train}
        for bag in splits.train:
            self.assertTrue(bag.same_as(original[bag.slide_id]))

    def test_manifest_lines(self):
        save_dataset(self.root, self.splits, self.spec)
        entries = read_manifest(self.root / MANIFEST_NAME)
        self.assertEqual(len(entries), 16)
        first = json.loads((self.root / MANIFEST_NAME).read_text(encoding="utf-8").splitlines()[0])
        self.assertEqual(set(first), {"slide_id", "task", "path", "label_term", "split"})

    def test_wrong_d_f(self):
        save_dataset(self.root, self.splits, self.spec)
        with self.assertRaises(IngestionError):
            load_dataset(self.root, expected_d_f=8)

    def test_missing_manifest(self):
        with self.assertRaises(IngestionError):
            load_dataset(self.root)

    def test_task_mismatch(self):
        save_dataset(self.root, self.splits, self.spec)
        path = self.root / MANIFEST_NAME
        path.write_text(path.read_text(encoding="utf-8").replace('"task": "brca"', '"task": "rcc"'), encoding="utf-8")
        with self.assertRaises(IngestionError):
            load_dataset(self.root)

    def test_malformed_line(self):
        save_dataset(self.root, self.splits, self.spec)
        (self.root / MANIFEST_NAME).write_text('{"slide_id": "x"}\n', encoding="utf-8")
        with self.assertRaises(ConfigError):
            load_dataset(self.root)
