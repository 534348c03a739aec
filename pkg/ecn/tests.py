import math

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigError, ContractError, DimensionError, NumericError
from ecn.layers import (
    ExpertConsultation,
    Router,
    SingleProjection,
    TaskProjection,
    build_projection,
    consult,
    project_baseline,
    route,
    scale_weights,
    shift_weights,
    task_indicator,
)
from tensor_core import ops
from tensor_core.gradcheck import check_gradients
from tensor_core.tensor import Tensor, no_grad


def softmax(values):
    e = np.exp(np.asarray(values) - np.max(values))
    return e / e.sum()


class TaskIndicatorTests(SimpleTestCase):
    def test_one_hot(self):
        np.testing.assert_array_equal(task_indicator(1, 3), [0, 1, 0])

    def test_out_of_range(self):
        with self.assertRaises(ContractError):
            task_indicator(3, 3)


class RouteTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.router = Router(5, 4, 3, self.rng)

    def test_zero_input_and_biases(self):
        self.router.fc1.bias.data[:] = 0.0
        self.router.fc2.bias.data[:] = 0.0
        with no_grad():
            raw = route(Tensor(np.zeros((6, 5))), self.router)
        np.testing.assert_array_equal(raw.data, np.zeros((3, 6)))

    def test_single_patch_shape(self):
        with no_grad():
            raw = route(Tensor(self.rng.normal(size=(1, 5))), self.router)
        self.assertEqual(raw.shape, (3, 1))

    def test_matches_explicit_two_layer_computation(self):
        x = self.rng.normal(size=(7, 5))
        r = self.router
        hidden = np.maximum(x @ r.fc1.weight.data + r.fc1.bias.data, 0.0)
        expected = (hidden @ r.fc2.weight.data + r.fc2.bias.data).T
        with no_grad():
            raw = route(Tensor(x), r)
        np.testing.assert_allclose(raw.data, expected, atol=1e-12)

    def test_feature_width_mismatch(self):
        with self.assertRaises(DimensionError):
            route(Tensor(np.ones((2, 6))), self.router)


class ScaleWeightsTests(SimpleTestCase):
    def test_zero_logits_are_unaffected(self):
        out = scale_weights(Tensor([[0.0], [0.0]]), 0, 5.0)
        np.testing.assert_allclose(out.data, [[0.5], [0.5]])

    def test_boosted_target(self):
        out = scale_weights(Tensor([[1.0], [0.0]]), 0, 5.0)
        self.assertAlmostEqual(out.data[0, 0], math.exp(5) / (math.exp(5) + 1), places=12)

    def test_columns_are_boosted_softmaxes(self):
        w = Tensor([[0.1, 0.2], [0.3, -0.1], [0.0, 0.0]])
        out = scale_weights(w, 1, 5.0).data
        np.testing.assert_allclose(out[:, 0], softmax([0.1, 1.5, 0.0]), rtol=1e-12)
        np.testing.assert_allclose(out[:, 1], softmax([0.2, -0.5, 0.0]), rtol=1e-12)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            tasks, patches = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            w = Tensor(rng.normal(scale=3.0, size=(tasks, patches)))
            out = scale_weights(w, int(rng.integers(tasks)), float(rng.uniform(0.5, 10.0))).data
            np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)
            self.assertTrue(np.all((out >= 0) & (out <= 1)))

    def test_larger_gamma_never_lowers_a_positive_target(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            w = rng.normal(size=(4, 6))
            w[2] = np.abs(w[2]) + 1e-3
            previous = None
            for gamma in (1.0, 2.0, 5.0, 10.0):
                target = scale_weights(Tensor(w), 2, gamma).data[2]
                if previous is not None:
                    self.assertTrue(np.all(target >= previous - 1e-15))
                previous = target

    def test_literal_denominator(self):
        out = scale_weights(Tensor([[1.0], [0.0]]), 0, 5.0, literal=True).data
        np.testing.assert_allclose(out[:, 0], [math.exp(5) / 6.0, 1.0 / 6.0], rtol=1e-12)

    def test_literal_zero_denominator(self):
        with self.assertRaises(NumericError):
            scale_weights(Tensor([[-0.25], [0.0]]), 0, 4.0, literal=True)


class ShiftWeightsTests(SimpleTestCase):
    def test_hand_arithmetic(self):
        out = shift_weights(Tensor([[0.7, 0.5], [0.3, 0.5]]), 0, 5.0)
        np.testing.assert_allclose(out.data, [5.6, 0.4], atol=1e-12)

    def test_single_task(self):
        out = shift_weights(scale_weights(Tensor([[0.4, -2.0, 3.0]]), 0, 5.0), 0, 5.0)
        np.testing.assert_allclose(out.data, [6.0])

    def test_zero_shift_sums_to_one(self):
        rng = np.random.default_rng(3)
        scaled = scale_weights(Tensor(rng.normal(size=(4, 7))), 3, 5.0)
        self.assertAlmostEqual(shift_weights(scaled, 3, 0.0).data.sum(), 1.0, places=12)

    def test_target_dominates(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            tasks = int(rng.integers(2, 6))
            t = int(rng.integers(tasks))
            scaled = scale_weights(Tensor(rng.normal(scale=5.0, size=(tasks, 5))), t, 5.0)
            shifted = shift_weights(scaled, t, 5.0).data
            self.assertEqual(int(np.argmax(shifted)), t)
            self.assertTrue(0.0 <= shifted[t] - 5.0 <= 1.0)


class ConsultTests(SimpleTestCase):
    def test_identity_expert(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = consult(Tensor(x), Tensor([2.0]), Tensor(np.zeros((4, 4))), [Tensor(np.eye(4))])
        np.testing.assert_allclose(out.data, 2 * x)

    def test_zero_experts(self):
        rng = np.random.default_rng(1)
        x, common = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        experts = [Tensor(np.zeros((4, 2))) for _ in range(3)]
        out = consult(Tensor(x), Tensor([7.0, -1.0, 0.3]), Tensor(common), experts)
        np.testing.assert_allclose(out.data, x @ common, atol=1e-12)

    def test_matches_dense_recomputation(self):
        rng = np.random.default_rng(2)
        x, common = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        experts = [rng.normal(size=(4, 3)) for _ in range(3)]
        shifted = np.array([5.2, 0.3, 0.5])
        expected = x @ (common + sum(w * e for w, e in zip(shifted, experts)))
        out = consult(Tensor(x), Tensor(shifted), Tensor(common), [Tensor(e) for e in experts])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_expert_count_mismatch(self):
        with self.assertRaises(DimensionError):
            consult(Tensor(np.ones((2, 2))), Tensor([1.0, 1.0]), Tensor(np.eye(2)), [Tensor(np.eye(2))])


class ExpertConsultationTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.ecn = ExpertConsultation(4, 3, 3, self.rng)

    def test_single_task_reduction(self):
        ecn = ExpertConsultation(4, 3, 1, self.rng, beta=5.0)
        x = self.rng.normal(size=(6, 4))
        with no_grad():
            out = ecn(Tensor(x), 0).data
        expected = x @ (ecn.common.data + 6.0 * ecn.experts[0].data)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_patch_permutation_equivariance(self):
        x = self.rng.normal(size=(8, 4))
        perm = self.rng.permutation(8)
        with no_grad():
            out = self.ecn(Tensor(x), 1).data
            permuted = self.ecn(Tensor(x[perm]), 1).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-10)

    def test_task_changes_the_projection(self):
        ecn = ExpertConsultation(4, 3, 3, np.random.default_rng(11))
        x = Tensor(self.rng.normal(size=(5, 4)))
        with no_grad():
            first = ecn.consulted_projection(x, 0).data
            second = ecn.consulted_projection(x, 2).data
        experts = [e.data for e in ecn.experts]
        closest = min(np.linalg.norm(a - b) for i, a in enumerate(experts) for b in experts[i + 1:])
        self.assertGreaterEqual(np.linalg.norm(first - second), (ecn.beta - 1) * closest - 1)

    def test_gradients(self):
        x = Tensor(self.rng.normal(size=(5, 4)), requires_grad=True)
        w = Tensor(self.rng.normal(size=(5, 3)))
        tensors = {"x": x, **self.ecn.parameters()}
        report = check_gradients(lambda: ops.sum(self.ecn(x, 2) * w), tensors)
        self.assertTrue(report.passed, report.failures)

    def test_literal_scaling_gradients(self):
        ecn = ExpertConsultation(4, 3, 2, self.rng, gamma=0.1, literal_scaling=True)
        x = Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(self.rng.normal(size=(3, 3)))
        report = check_gradients(lambda: ops.sum(ecn(x, 0) * w), {"x": x, **ecn.parameters()})
        self.assertTrue(report.passed, report.failures)

    def test_parameter_names(self):
        names = list(self.ecn.parameters())
        self.assertEqual(names[:4], ["experts.0", "experts.1", "experts.2", "common"])
        self.assertIn("router.fc2.bias", names)

    def test_router_without_biases(self):
        ecn = ExpertConsultation(4, 3, 2, self.rng, router_bias=False)
        self.assertNotIn("router.fc1.bias", ecn.parameters())

    def test_rejects_bad_hyperparameters(self):
        with self.assertRaises(ConfigError):
            ExpertConsultation(4, 3, 2, self.rng, gamma=0.0)
        with self.assertRaises(ConfigError):
            ExpertConsultation(4, 3, 2, self.rng, beta=float("nan"))
        with self.assertRaises(ConfigError):
            ExpertConsultation(4, 3, 0, self.rng)

    def test_missing_task(self):
        with self.assertRaises(ContractError):
            self.ecn(Tensor(np.ones((2, 4))), None)


class BaselineProjectionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_single_projection_of_zero_bag(self):
        p1 = SingleProjection(4, 3, self.rng)
        out = project_baseline(Tensor(np.zeros((2, 4))), p1)
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_one_task_matches_single_projection(self):
        p1 = SingleProjection(4, 3, self.rng)
        pt = TaskProjection(4, 3, 1, self.rng)
        pt.projections[0].load_state_dict(p1.linear.state_dict())
        x = Tensor(self.rng.normal(size=(5, 4)))
        np.testing.assert_array_equal(project_baseline(x, pt, 0).data, project_baseline(x, p1).data)

    def test_task_projection_ignores_other_tasks(self):
        pt = TaskProjection(4, 3, 2, self.rng)
        x = Tensor(self.rng.normal(size=(5, 4)))
        before = project_baseline(x, pt, 1).data
        pt.projections[0].weight.data += 10.0
        np.testing.assert_array_equal(project_baseline(x, pt, 1).data, before)

    def test_task_projection_needs_a_task(self):
        pt = TaskProjection(4, 3, 2, self.rng)
        with self.assertRaises(ContractError):
            project_baseline(Tensor(np.ones((1, 4))), pt)

    def test_expert_consultation_is_not_a_baseline(self):
        with self.assertRaises(ContractError):
            project_baseline(Tensor(np.ones((1, 4))), ExpertConsultation(4, 3, 2, self.rng), 0)

    def test_build_projection(self):
        self.assertIsInstance(build_projection("ecn", 4, 3, 2, self.rng), ExpertConsultation)
        self.assertIsInstance(build_projection("p1", 4, 3, 2, self.rng), SingleProjection)
        self.assertIsInstance(build_projection("pt", 4, 3, 2, self.rng), TaskProjection)
        with self.assertRaises(ConfigError):
            build_projection("moe", 4, 3, 2, self.rng)
