import math
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ContractError, DimensionError, NumericError
from tensor_core import ops
from tensor_core.gradcheck import check_gradients, op_cases, run_op_suite
from tensor_core.nn import Linear, Module, Parameter
from tensor_core.ops import MatMul
from tensor_core.tensor import Tensor, backward, current_tape, no_grad


class MatmulTests(SimpleTestCase):
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = ops.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_arithmetic(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[0], [1]])
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_gradient_of_sum_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        report = check_gradients(lambda: ops.sum(a @ b), {"a": a, "b": b}, tolerance=1e-5)
        self.assertTrue(report.passed, report.failures)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_associativity(self):
        rng = np.random.default_rng(2)
        a, b, c = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


class SoftmaxTests(SimpleTestCase):
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_large_inputs_do_not_overflow(self):
        np.testing.assert_allclose(ops.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_scalar_oracle(self):
        x = [0.1, 1.5, 0.0]
        expected = [math.exp(v) / sum(math.exp(u) for u in x) for v in x]
        np.testing.assert_allclose(ops.softmax(Tensor(x)).data, expected, rtol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = ops.softmax(Tensor(rng.normal(scale=10, size=(20, 7))), axis=-1)
        np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-10)
        self.assertTrue(np.all(p.data >= 0))

    def test_non_finite_input(self):
        with self.assertRaises(NumericError):
            ops.softmax(Tensor([np.nan, 1.0]))


class LayerNormTests(SimpleTestCase):
    def test_constant_row_maps_to_zero(self):
        out = ops.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_hand_arithmetic(self):
        out = ops.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.array([1.0, -1.0]) / math.sqrt(1 + 1e-5))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)))
        report = check_gradients(lambda: ops.sum(ops.layer_norm(x, g, b) * w), {"x": x, "g": g, "b": b})
        self.assertTrue(report.passed, report.failures)


class BackwardTests(SimpleTestCase):
    def setUp(self):
        current_tape().clear()

    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(ops.sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_softmax_cross_entropy_identity(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        onehot = Tensor(np.eye(4)[[2]])
        loss = -ops.sum(ops.log(ops.softmax(x, axis=-1)) * onehot)
        backward(loss)
        p = np.exp(x.data) / np.exp(x.data).sum()
        np.testing.assert_allclose(x.grad, p - onehot.data, atol=1e-12)

        x.zero_grad()
        backward(ops.cross_entropy(x, [2]))
        np.testing.assert_allclose(x.grad, p - onehot.data, atol=1e-12)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(ContractError):
            backward(x * x)
        self.assertEqual(len(current_tape()), 0)

    def test_tape_cleared_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ops.sum(ops.exp(x))
        self.assertGreater(len(current_tape()), 0)
        backward(loss)
        self.assertEqual(len(current_tape()), 0)

    def test_intermediate_tensors_receive_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ops.exp(x)
        backward(ops.sum(y))
        np.testing.assert_allclose(y.grad, np.ones(2))
        np.testing.assert_allclose(x.grad, np.exp(x.data))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * x
        self.assertFalse(y.requires_grad)
        self.assertEqual(len(current_tape()), 0)

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        backward(ops.sum(x * x + x))
        np.testing.assert_allclose(x.grad, [7.0])


class ShapeRuleTests(SimpleTestCase):
    def test_bias_add_over_rows(self):
        out = Tensor(np.zeros((2, 3))) + Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_scalars_stay_zero_dimensional(self):
        self.assertEqual(Tensor(3.0).shape, ())
        self.assertEqual(Tensor(np.float64(2.0)).shape, ())
        self.assertEqual(ops.max(Tensor([1.0, 5.0])).shape, ())

    def test_scalar_times_matrix(self):
        a = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        out = s * a
        np.testing.assert_array_equal(out.data, 2.0 * np.arange(9.0).reshape(3, 3))
        backward(ops.sum(a * s))
        np.testing.assert_array_equal(a.grad, np.full((3, 3), 2.0))
        self.assertEqual(s.grad.shape, ())
        self.assertAlmostEqual(float(s.grad), 36.0)

    def test_no_general_broadcasting(self):
        with self.assertRaises(DimensionError):
            Tensor(np.zeros((2, 3))) * Tensor(np.zeros((1, 3)))
        with self.assertRaises(DimensionError):
            Tensor(np.zeros((2, 3))) - Tensor(np.zeros(3))


class OpSuiteTests(SimpleTestCase):
    def test_every_op_matches_finite_differences(self):
        self.assertGreaterEqual(len(op_cases(np.random.default_rng(0))), 20)
        report = run_op_suite(tolerance=1e-4)
        self.assertTrue(report.passed, [(r.group, r.worst_relative_error) for r in report.failures])

    def test_corrupted_backward_rule_is_named(self):
        def wrong(self, grad):
            return grad @ np.swapaxes(self.b, -1, -2) * 2.0, np.swapaxes(self.a, -1, -2) @ grad

        with mock.patch.object(MatMul, "backward", wrong):
            report = run_op_suite()
        self.assertFalse(report.passed)
        self.assertTrue(all(r.group.startswith("matmul") for r in report.failures))


class ModuleTests(SimpleTestCase):
    def test_named_parameters_and_state_round_trip(self):
        class Pair(Module):
            def __init__(self, rng):
                self.first = Linear(3, 2, rng)
                self.rest = [Linear(2, 2, rng, bias=False)]
                self.scale = Parameter(np.ones(1))

        rng = np.random.default_rng(0)
        model = Pair(rng)
        names = list(model.parameters())
        self.assertEqual(names, ["first.weight", "first.bias", "rest.0.weight", "scale"])

        state = model.state_dict()
        other = Pair(np.random.default_rng(9))
        other.load_state_dict(state)
        for name, p in other.parameters().items():
            np.testing.assert_array_equal(p.data, state[name])

    def test_linear_rejects_wrong_width(self):
        layer = Linear(4, 2, np.random.default_rng(0))
        with self.assertRaises(DimensionError):
            layer(Tensor(np.ones((3, 5))))
