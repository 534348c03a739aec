import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from core.exceptions import ConfigError, ContractError, NumericError
from data_pipeline.synthetic import SyntheticSpec, generate_synthetic
from data_pipeline.taskspec import Category, Task, TaskSpec
from mecformer.checkpoint import load_model
from mecformer.config import ModelConfig
from mecformer.network import Mecformer
from tensor_core.nn import Parameter
from training import loop
from training.binding import TaskBinding, bindings_for
from training.config import TrainConfig
from training.loop import train, validation_loss
from training.optim import Optimizer, OptimizerState, adam_step, lookahead_sync, radam_step
from training.rundir import RunDir, config_fingerprint, runs_root
from training.seeding import derive_seed


def scalar_radam(grad, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook scalar RAdam, used as an independent oracle."""
    w, m, v = 0.0, 0.0, 0.0
    rho_inf = 2 / (1 - beta2) - 1
    trace = []
    for t in range(1, steps + 1):
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        rho = rho_inf - 2 * t * beta2 ** t / (1 - beta2 ** t)
        if rho >= 5:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            v_hat = math.sqrt(v / (1 - beta2 ** t))
            w -= lr * r * m_hat / (v_hat + eps)
        else:
            w -= lr * m_hat
        trace.append(w)
    return trace


def two_task_spec():
    return TaskSpec([
        Task("brca", (Category("idc", "ductal carcinoma"), Category("ilc", "lobular carcinoma"))),
        Task("camelyon16", (Category("normal", "normal tissue"), Category("tumor", "metastatic tumor"))),
    ])


def tiny_setup(bags_per_class=3, seed=0):
    spec = two_task_spec()
    data = SyntheticSpec(d_f=6, signal_fraction=1.0, noise=0.1, bags_per_class=bags_per_class,
                         min_patches=3, max_patches=5, seed=seed)
    bags = generate_synthetic(data, spec)
    cfg = ModelConfig.for_task_spec(spec, d_f=6, d_model=16, heads=2, encoder_layers=1, decoder_layers=1,
                                    max_decode_len=4)
    return spec, bags, cfg


class RAdamTests(SimpleTestCase):
    def test_zero_gradients_leave_parameters(self):
        param = Parameter(np.array([1.0, -2.0, 3.0]))
        state = OptimizerState()
        for _ in range(10):
            param.grad = np.zeros(3)
            radam_step({"w": param}, state, lr=0.1)
        np.testing.assert_array_equal(param.data, [1.0, -2.0, 3.0])
        self.assertEqual(state.step, 10)

    def test_scalar_trace_matches_textbook_form(self):
        param = Parameter(np.array([0.0]))
        state = OptimizerState()
        trace = []
        for _ in range(10):
            param.grad = np.array([0.5])
            radam_step({"w": param}, state, lr=0.1)
            trace.append(param.data[0])
        expected = scalar_radam(0.5, 10, 0.1)
        # the first five steps are plain momentum, the rest are rectified
        np.testing.assert_allclose(trace[:5], expected[:5], rtol=1e-12)
        np.testing.assert_allclose(trace, expected, rtol=1e-6)

    def test_quadratic_bowl(self):
        param = Parameter(np.array([1.0, -2.0, 3.0]))
        state = OptimizerState()
        losses = []
        for _ in range(60):
            losses.append(float(np.sum(param.data ** 2)))
            param.grad = 2.0 * param.data
            radam_step({"w": param}, state, lr=0.1)
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])))

    def test_non_finite_gradient_names_parameter(self):
        param = Parameter(np.zeros(2))
        param.grad = np.array([0.0, np.nan])
        with self.assertRaisesMessage(NumericError, "encoder.0.w_q"):
            radam_step({"encoder.0.w_q": param}, OptimizerState(), lr=0.1)

    def test_parameters_without_gradient_are_skipped(self):
        a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
        a.grad = np.ones(2)
        adam_step({"a": a, "b": b}, OptimizerState(), lr=0.1)
        np.testing.assert_array_equal(b.data, np.ones(2))
        self.assertTrue(np.all(a.data < 1.0))


class LookaheadTests(SimpleTestCase):
    def test_alpha_one_keeps_fast_weights(self):
        param = Parameter(np.array([2.0]))
        slow = {"w": np.array([0.0])}
        lookahead_sync({"w": param}, slow, alpha=1.0)
        np.testing.assert_array_equal(slow["w"], [2.0])
        np.testing.assert_array_equal(param.data, [2.0])

    def test_alpha_zero_resets_fast_weights(self):
        param = Parameter(np.array([2.0]))
        slow = {"w": np.array([0.5])}
        lookahead_sync({"w": param}, slow, alpha=0.0)
        np.testing.assert_array_equal(param.data, [0.5])

    def test_two_syncs(self):
        param = Parameter(np.array([0.0]))
        optimizer = Optimizer({"w": param}, lr=0.1, lookahead_k=5, lookahead_alpha=0.5)

        def fake_step(params, state, lr):
            state.step += 1
            params["w"].data = params["w"].data + 0.2

        optimizer.step_fn = fake_step
        trace = []
        for _ in range(10):
            optimizer.step()
            trace.append(param.data[0])
        np.testing.assert_allclose(trace[4], 0.5)
        np.testing.assert_allclose(optimizer.slow["w"], [1.0])
        np.testing.assert_allclose(trace[-1], 1.0)
        np.testing.assert_allclose(trace[5], 0.7)
        self.assertEqual(optimizer.syncs, 2)

    def test_adam_has_no_lookahead(self):
        optimizer = Optimizer({"w": Parameter(np.zeros(1))}, lr=0.1, kind="adam")
        self.assertIsNone(optimizer.lookahead_k)

    def test_bad_settings(self):
        with self.assertRaises(ConfigError):
            Optimizer({}, lr=0.0)
        with self.assertRaises(ConfigError):
            Optimizer({}, lr=0.1, kind="sgd")
        with self.assertRaises(ConfigError):
            Optimizer({}, lr=0.1, lookahead_alpha=1.5)


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.epochs, cfg.patience, cfg.batch_size), (200, 5, 1))
        self.assertEqual((cfg.lookahead_k, cfg.lookahead_alpha), (5, 0.5))

    def test_collects_problems(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig(lr=-1.0, patience=0, setting="solo")
        for fragment in ("lr", "patience", "setting"):
            self.assertIn(fragment, str(ctx.exception))

    def test_batch_size_is_one_bag(self):
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=4)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.9})
        self.assertEqual(TrainConfig.from_dict(TrainConfig(seed=3).to_dict()).seed, 3)


class BindingTests(SimpleTestCase):
    def setUp(self):
        self.spec, self.bags, _ = tiny_setup(bags_per_class=1)

    def test_joint_task_passes_task_index(self):
        (binding,) = bindings_for("joint_task", self.spec)
        bag = self.bags[-1]
        self.assertEqual(binding.task_of(bag), 1)
        self.assertEqual(binding.category(bag), 3)

    def test_joint_hides_the_task(self):
        (binding,) = bindings_for("joint", self.spec)
        self.assertEqual(binding.task_spec.task_count, 1)
        self.assertTrue(all(binding.task_of(b) == 0 for b in self.bags))
        self.assertEqual(binding.category(self.bags[-1]), 3)

    def test_individual_builds_one_binding_per_task(self):
        bindings = bindings_for("individual", self.spec)
        self.assertEqual([b.label for b in bindings], ["brca", "camelyon16"])
        second = bindings[1]
        self.assertEqual([b.task_id for b in second.select(self.bags)], [1, 1])
        self.assertEqual(second.category(self.bags[-1]), 1)

    def test_round_trip(self):
        binding = bindings_for("individual", self.spec)[1]
        self.assertEqual(TaskBinding.from_dict(binding.to_dict()), binding)

    def test_unknown_setting(self):
        with self.assertRaises(ConfigError):
            bindings_for("solo", self.spec)


class SeedingTests(SimpleTestCase):
    def test_labels_separate_streams(self):
        self.assertEqual(derive_seed(3, "init"), derive_seed(3, "init"))
        self.assertNotEqual(derive_seed(3, "init"), derive_seed(3, "shuffle"))
        self.assertNotEqual(derive_seed(3, "init"), derive_seed(4, "init"))


class RunDirTests(SimpleTestCase):
    def test_fingerprint_ignores_key_order(self):
        self.assertEqual(config_fingerprint({"a": 1, "b": 2}), config_fingerprint({"b": 2, "a": 1}))

    def test_root_follows_settings(self):
        with override_settings(MECFORMER_RUNS_ROOT="/tmp/elsewhere"):
            self.assertEqual(runs_root(), Path("/tmp/elsewhere"))
            self.assertEqual(RunDir.for_config({"a": 1}).root.parent, Path("/tmp/elsewhere"))

    def test_best_marker_replaces_previous(self):
        with tempfile.TemporaryDirectory() as tmp:
            run = RunDir(tmp).prepare()
            first, second = run.checkpoint_path(1), run.checkpoint_path(2)
            first.write_bytes(b"1")
            run.mark_best(first, keep_previous=False)
            second.write_bytes(b"2")
            run.mark_best(second, keep_previous=False)
            self.assertEqual(run.best_checkpoint(), second)
            self.assertFalse(first.exists())

    def test_missing_marker(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FileNotFoundError):
                RunDir(tmp).best_checkpoint()


class TrainLoopTests(SimpleTestCase):
    def setUp(self):
        self.spec, self.bags, self.cfg = tiny_setup()
        self.binding = TaskBinding(self.spec)

    def test_patience_stops_after_one_bad_epoch(self):
        model = Mecformer(self.cfg)
        with mock.patch.object(loop, "validation_loss", side_effect=[1.0, 2.0, 3.0, 4.0]):
            result = train(model, self.binding, self.bags, self.bags, TrainConfig(epochs=10, patience=1))
        self.assertEqual(len(result.history), 2)
        self.assertTrue(result.stopped_early)
        self.assertEqual(result.best_epoch, 1)

    def test_best_state_is_restored(self):
        model = Mecformer(self.cfg)
        snapshots = []

        def fake_validation(m, bags, binding, workers=1):
            snapshots.append(m.state_dict())
            return [3.0, 1.0, 2.0][len(snapshots) - 1]

        with mock.patch.object(loop, "validation_loss", side_effect=fake_validation):
            train(model, self.binding, self.bags, self.bags, TrainConfig(epochs=3, patience=5))
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(array, snapshots[1][name])

    def test_identical_seeds_identical_histories(self):
        histories = []
        for _ in range(2):
            model = Mecformer(self.cfg, seed=derive_seed(5, "init"))
            result = train(model, self.binding, self.bags, self.bags[:4], TrainConfig(epochs=3, seed=5))
            histories.append([(r.train_loss, r.val_loss) for r in result.history])
        self.assertEqual(histories[0], histories[1])

    def test_two_task_overfit(self):
        model = Mecformer(self.cfg, seed=1)
        cfg = TrainConfig(lr=1e-2, optimizer="adam", epochs=50, patience=50)
        result = train(model, self.binding, self.bags, self.bags, cfg)
        self.assertLess(min(result.train_losses), 0.1)

    def test_checkpoint_reproduces_validation_loss(self):
        with tempfile.TemporaryDirectory() as tmp:
            run = RunDir(Path(tmp) / "run")
            model = Mecformer(self.cfg)
            result = train(model, self.binding, self.bags, self.bags[:5], TrainConfig(epochs=3), run)
            self.assertEqual(result.best_checkpoint, run.best_checkpoint())
            self.assertEqual(len(run.read_history()), 3)
            loaded, metadata = load_model(result.best_checkpoint)
            self.assertEqual(TaskBinding.from_dict(metadata["binding"]), self.binding)
            self.assertEqual(validation_loss(loaded, self.bags[:5], self.binding), result.best_val_loss)
            self.assertEqual(len(list(run.checkpoint_dir.glob("*.ckpt"))), 1)

    def test_parallel_validation_matches_serial(self):
        model = Mecformer(self.cfg)
        serial = validation_loss(model, self.bags, self.binding)
        self.assertEqual(validation_loss(model, self.bags, self.binding, workers=3), serial)

    def test_gradient_accumulation_step_count(self):
        model = Mecformer(self.cfg)
        calls = []
        real_step = Optimizer.step

        def counting(optimizer):
            calls.append(1)
            real_step(optimizer)

        with mock.patch.object(Optimizer, "step", counting):
            train(model, self.binding, self.bags[:5], [], TrainConfig(epochs=1, grad_accum=2))
        self.assertEqual(len(calls), 3)

    def test_non_finite_loss_reports_context(self):
        model = Mecformer(self.cfg)
        model.classifier.bias.data[:] = np.nan
        with self.assertRaisesMessage(NumericError, "epoch 1, bag"):
            train(model, self.binding, self.bags, self.bags, TrainConfig(epochs=1))

    def test_individual_binding_trains_on_its_task(self):
        binding = bindings_for("individual", self.spec)[1]
        cfg = ModelConfig.for_task_spec(binding.task_spec, d_f=6, d_model=8, heads=2, encoder_layers=1,
                                        decoder_layers=1, max_decode_len=4)
        result = train(Mecformer(cfg), binding, self.bags, self.bags, TrainConfig(epochs=1))
        self.assertEqual(len(result.history), 1)

    def test_no_training_bags(self):
        binding = TaskBinding(self.spec, "individual", source_task=1)
        with self.assertRaises(ContractError):
            train(Mecformer(self.cfg), binding, [b for b in self.bags if b.task_id == 0], [], TrainConfig(epochs=1))
