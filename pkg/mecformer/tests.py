import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.constants import BOS_ID, CHECKPOINT_MAGIC, EOS_ID, PUBLISHED_VOCAB_SIZE
from core.exceptions import (
    BadMagicError,
    ConfigError,
    ContractError,
    DimensionError,
    IncompatibilityError,
    TruncatedPayloadError,
    VocabularyError,
)
from data_pipeline.taskspec import Category, Task, TaskSpec, default_task_spec
from mecformer.checkpoint import load_model, read_checkpoint, save_checkpoint
from mecformer.config import ModelConfig
from mecformer.network import Mecformer
from mecformer.verification import model_gradcheck, tiny_config
from tensor_core.tensor import Tensor, backward, no_grad
from training.optim import Optimizer


def layer_norm_rows(x, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def log_softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class ModelConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = ModelConfig()
        self.assertEqual(cfg.pwff_hidden, 4 * cfg.d_model)
        self.assertEqual(cfg.vocab_size, PUBLISHED_VOCAB_SIZE)

    def test_for_default_task_spec(self):
        cfg = ModelConfig.for_task_spec(default_task_spec())
        self.assertEqual((cfg.task_count, cfg.vocab_size, cfg.category_count), (5, 18, 11))

    def test_collects_every_problem(self):
        with self.assertRaises(ConfigError) as ctx:
            ModelConfig(d_model=30, heads=4, vocab_size=2, gamma=0.0)
        message = str(ctx.exception)
        for fragment in ("divisible", "vocab_size", "gamma"):
            self.assertIn(fragment, message)

    def test_odd_width_rejected(self):
        with self.assertRaises(ConfigError):
            ModelConfig(d_model=9, heads=1)

    def test_unknown_projection(self):
        with self.assertRaises(ConfigError):
            ModelConfig(projection_kind="mlp")

    def test_from_dict_rejects_unknown_keys(self):
        with self.assertRaises(ConfigError):
            ModelConfig.from_dict({"d_model": 64, "dropout": 0.1})

    def test_round_trip_through_dict(self):
        cfg = tiny_config(gamma=3.0)
        self.assertEqual(ModelConfig.from_dict(cfg.to_dict()), cfg)

    def test_evolve_rederives_hidden_width(self):
        cfg = ModelConfig(d_model=16, heads=2).evolve(d_model=32)
        self.assertEqual(cfg.pwff_hidden, 128)
        fixed = ModelConfig(d_model=16, heads=2, pwff_hidden=20).evolve(d_model=32)
        self.assertEqual(fixed.pwff_hidden, 20)

    def test_parameter_count_depends_on_config_only(self):
        cfg = tiny_config()
        a, b = Mecformer(cfg, seed=0), Mecformer(cfg, seed=9)
        self.assertEqual(a.parameter_count(), b.parameter_count())
        self.assertEqual({k: v.shape for k, v in a.state_dict().items()},
                         {k: v.shape for k, v in b.state_dict().items()})


class EncodeTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_empty_stack_returns_projection(self):
        model = Mecformer(tiny_config(encoder_layers=0))
        x = Tensor(self.rng.normal(size=(5, 6)))
        with no_grad():
            np.testing.assert_array_equal(model.encode(x, 1).data, model.project(x, 1).data)

    def test_zero_value_branch_is_residual_only(self):
        model = Mecformer(tiny_config(encoder_layers=2))
        for layer in model.encoder:
            layer.attention.w_v.data[:] = 0.0
            layer.attention.w_o.data[:] = 0.0
        x = Tensor(self.rng.normal(size=(7, 6)))
        with no_grad():
            np.testing.assert_array_equal(model.encode(x, 0).data, model.project(x, 0).data)

    def test_single_patch_exact_layer(self):
        model = Mecformer(tiny_config(use_exact_attention=True))
        x = Tensor(self.rng.normal(size=(1, 6)))
        attn = model.encoder[0].attention
        with no_grad():
            v0 = model.project(x, 0).data
            v = model.encode(x, 0).data
        expected = v0 + layer_norm_rows(v0) @ attn.w_v.data @ attn.w_o.data
        np.testing.assert_allclose(v, expected, atol=1e-12)

    def test_wrong_feature_width(self):
        model = Mecformer(tiny_config())
        with self.assertRaises(DimensionError):
            model.encode(Tensor(np.zeros((3, 5))), 0)


class DecodeTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.model = Mecformer(tiny_config(), seed=2)
        with no_grad():
            self.v = self.model.encode(Tensor(self.rng.normal(size=(4, 6))), 0)

    def test_logits_per_position(self):
        with no_grad():
            logits = self.model.decode_step([BOS_ID, 3, 4], self.v)
        self.assertEqual(logits.shape, (3, 6))

    def test_earlier_positions_ignore_later_tokens(self):
        with no_grad():
            a = self.model.decode_step([BOS_ID, 2, 3, 4], self.v).data
            b = self.model.decode_step([BOS_ID, 2, 5, 5], self.v).data
        np.testing.assert_array_equal(a[:2], b[:2])

    def test_step_by_step_recomposition(self):
        tokens = [BOS_ID, 5, 2, 3]
        with no_grad():
            full = self.model.decode_step(tokens, self.v).data
            for i in range(1, len(tokens) + 1):
                prefix = self.model.decode_step(tokens[:i], self.v).data
                np.testing.assert_allclose(prefix[-1], full[i - 1], atol=1e-12)

    def test_empty_tokens(self):
        with self.assertRaises(ContractError):
            self.model.decode_step([], self.v)

    def test_unknown_token_id(self):
        with self.assertRaises(VocabularyError):
            self.model.decode_step([BOS_ID, 6], self.v)


class GenerateTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.x = Tensor(self.rng.normal(size=(5, 6)))

    def biased_model(self, favourite: int) -> Mecformer:
        model = Mecformer(tiny_config(), seed=0)
        model.classifier.weight.data[:] = 0.0
        model.classifier.bias.data[:] = 0.0
        model.classifier.bias.data[favourite] = 10.0
        return model

    def test_eos_first_gives_empty_term(self):
        generation = self.biased_model(EOS_ID).generate(self.x, 0)
        self.assertEqual(generation.token_ids, [])
        self.assertEqual(generation.steps, 1)
        self.assertFalse(generation.truncated)

    def test_never_eos_truncates(self):
        model = self.biased_model(2)
        generation = model.generate(self.x, 1)
        self.assertEqual(generation.token_ids, [2] * model.config.max_decode_len)
        self.assertTrue(generation.truncated)
        self.assertEqual(generation.steps, model.config.max_decode_len)

    def test_random_models_terminate(self):
        for seed in range(20):
            model = Mecformer(tiny_config(), seed=seed)
            generation = model.generate(Tensor(self.rng.normal(size=(3, 6))), seed % 2)
            self.assertLessEqual(generation.steps, model.config.max_decode_len)
            self.assertLessEqual(len(generation.token_ids), model.config.max_decode_len)
            self.assertNotIn(EOS_ID, generation.token_ids)

    def test_patch_order_does_not_change_the_term(self):
        model = Mecformer(tiny_config(use_exact_attention=True), seed=4)
        for _ in range(20):
            features = self.rng.normal(size=(6, 6))
            expected = model.generate(Tensor(features), 0).token_ids
            for _ in range(20):
                shuffled = features[self.rng.permutation(6)]
                self.assertEqual(model.generate(Tensor(shuffled), 0).token_ids, expected)

    def test_words_follow_vocabulary(self):
        spec = TaskSpec([Task("t", (Category("a", "red"), Category("b", "blue sky")))])
        cfg = tiny_config(task_count=1, vocab_size=spec.vocabulary.size, category_count=2)
        model = Mecformer(cfg)
        model.classifier.weight.data[:] = 0.0
        model.classifier.bias.data[:] = 0.0
        model.classifier.bias.data[spec.vocabulary.id_of("red")] = 10.0
        generation = model.generate(self.x, 0, vocabulary=spec.vocabulary)
        self.assertEqual(generation.term, " ".join(["red"] * cfg.max_decode_len))

    def test_overfits_a_single_slide(self):
        spec = TaskSpec([Task("brca", (Category("idc", "ductal carcinoma"), Category("ilc", "lobular carcinoma")))])
        cfg = ModelConfig.for_task_spec(spec, d_f=6, d_model=16, heads=2, encoder_layers=1, decoder_layers=1,
                                        max_decode_len=4)
        model = Mecformer(cfg, seed=0)
        x = Tensor(self.rng.normal(size=(8, 6)))
        target = spec.target_ids("ductal carcinoma")
        optimizer = Optimizer(model.parameters(), lr=1e-2, kind="adam")
        for _ in range(200):
            backward(model.teacher_forced_loss(x, 0, target))
            optimizer.step()
            optimizer.zero_grad()
        self.assertEqual(model.generate(x, 0, vocabulary=spec.vocabulary).term, "ductal carcinoma")


class LossTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.x = Tensor(self.rng.normal(size=(4, 6)))

    def test_uniform_logits(self):
        model = Mecformer(tiny_config())
        model.classifier.weight.data[:] = 0.0
        with no_grad():
            loss = model.teacher_forced_loss(self.x, 0, [BOS_ID, 2, 3, EOS_ID])
        self.assertAlmostEqual(loss.item(), math.log(6), places=12)

    def test_confident_logits(self):
        model = Mecformer(tiny_config())
        model.classifier.weight.data[:] = 0.0
        model.classifier.bias.data[EOS_ID] = 50.0
        with no_grad():
            loss = model.teacher_forced_loss(self.x, 0, [BOS_ID, EOS_ID])
        self.assertLess(loss.item(), 1e-12)

    def test_matches_per_position_cross_entropy(self):
        model = Mecformer(tiny_config(), seed=7)
        target = [BOS_ID, 4, 2, 5, EOS_ID]
        with no_grad():
            loss = model.teacher_forced_loss(self.x, 1, target).item()
            logits = model.decode_step(target[:-1], model.encode(self.x, 1)).data
        log_probs = log_softmax_rows(logits)
        expected = -np.mean([log_probs[i, target[i + 1]] for i in range(len(target) - 1)])
        self.assertAlmostEqual(loss, expected, places=12)

    def test_target_contract(self):
        model = Mecformer(tiny_config())
        for target in ([], [BOS_ID], [2, 3, EOS_ID], [BOS_ID, 2]):
            with self.assertRaises(ContractError):
                model.teacher_forced_loss(self.x, 0, target)


class HeadOnlyTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.model = Mecformer(tiny_config(use_decoder=False), seed=1)

    def test_single_patch_pooling_is_identity(self):
        x = Tensor(self.rng.normal(size=(1, 6)))
        with no_grad():
            logits = self.model.classify_headonly(x, 0).data
            v = self.model.encode(x, 0).data
        head = self.model.head
        np.testing.assert_allclose(logits, v[0] @ head.weight.data + head.bias.data, atol=1e-12)

    def test_one_logit_per_category(self):
        with no_grad():
            logits = self.model.classify_headonly(Tensor(self.rng.normal(size=(5, 6))), 1)
        self.assertEqual(logits.shape, (4,))

    def test_decoder_model_refuses(self):
        with self.assertRaises(ContractError):
            Mecformer(tiny_config()).classify_headonly(Tensor(np.zeros((2, 6))), 0)

    def test_head_only_has_no_decoder(self):
        with self.assertRaises(ContractError):
            self.model.generate(Tensor(np.zeros((2, 6))), 0)
        self.assertFalse(any(name.startswith("decoder") for name in self.model.parameters()))


class GradientTests(SimpleTestCase):
    def test_tiny_model(self):
        report = model_gradcheck()
        self.assertTrue(report.passed, [f.group for f in report.failures])

    def test_head_only(self):
        report = model_gradcheck(tiny_config(use_decoder=False), max_entries=20)
        self.assertTrue(report.passed, [f.group for f in report.failures])

    def test_variants(self):
        for overrides in ({"projection_kind": "pt"}, {"projection_kind": "p1"},
                          {"pwff_residual": True, "use_exact_attention": True}):
            report = model_gradcheck(tiny_config(**overrides), max_entries=10)
            self.assertTrue(report.passed, (overrides, [f.group for f in report.failures]))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "model.ckpt"
        self.model = Mecformer(tiny_config(gamma=4.0), seed=3)

    def test_round_trip_is_bit_exact(self):
        save_checkpoint(self.path, self.model, {"epoch": 7})
        loaded, metadata = load_model(self.path)
        self.assertEqual(loaded.config, self.model.config)
        self.assertEqual(metadata, {"epoch": 7})
        for name, array in self.model.state_dict().items():
            self.assertEqual(loaded.state_dict()[name].tobytes(), array.tobytes())

    def test_loss_survives_round_trip(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
        target = [BOS_ID, 3, EOS_ID]
        save_checkpoint(self.path, self.model)
        loaded, _ = load_model(self.path)
        with no_grad():
            self.assertEqual(self.model.loss(x, 1, target, 0).item(), loaded.loss(x, 1, target, 0).item())

    def test_bad_magic(self):
        save_checkpoint(self.path, self.model)
        payload = self.path.read_bytes()
        self.path.write_bytes(b"XXXX" + payload[len(CHECKPOINT_MAGIC):])
        with self.assertRaises(BadMagicError):
            read_checkpoint(self.path)

    def test_truncated(self):
        save_checkpoint(self.path, self.model)
        self.path.write_bytes(self.path.read_bytes()[:-5])
        with self.assertRaises(TruncatedPayloadError):
            read_checkpoint(self.path)

    def test_future_version(self):
        save_checkpoint(self.path, self.model)
        payload = bytearray(self.path.read_bytes())
        payload[4:8] = (99).to_bytes(4, "little")
        self.path.write_bytes(bytes(payload))
        with self.assertRaises(IncompatibilityError):
            read_checkpoint(self.path)

    def test_unknown_setting(self):
        save_checkpoint(self.path, self.model)
        payload = self.path.read_bytes()
        text_len = int.from_bytes(payload[8:12], "little")
        text = payload[12:12 + text_len] + b"\ndropout=0.1"
        patched = payload[:8] + len(text).to_bytes(4, "little") + text + payload[12 + text_len:]
        self.path.write_bytes(patched)
        with self.assertRaises(IncompatibilityError):
            read_checkpoint(self.path)
