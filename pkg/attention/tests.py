import math

import numpy as np
from django.test import SimpleTestCase

from attention.layers import AttentionParams, exact_mhsa, mhca
from attention.nystrom import NystromConfig, iterative_pinv, nystrom_attention, padding_for
from attention.positional import sinusoidal_pe
from core.constants import DEFAULT_PINV_ITERATIONS
from core.exceptions import ConfigError
from tensor_core import ops
from tensor_core.gradcheck import check_gradients
from tensor_core.tensor import Tensor, no_grad


def rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def pinv_residual(a: np.ndarray, z: np.ndarray) -> float:
    return float(np.linalg.norm(a @ z @ a - a) / np.linalg.norm(a))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class PositionalEncodingTests(SimpleTestCase):
    def test_first_row_alternates(self):
        pe = sinusoidal_pe(3, 6).data
        np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])

    def test_bounded(self):
        pe = sinusoidal_pe(50, 16).data
        self.assertTrue(np.all(np.abs(pe) <= 1.0))

    def test_scalar_value(self):
        self.assertAlmostEqual(sinusoidal_pe(2, 8).data[1, 0], 0.841471, places=6)
        self.assertAlmostEqual(sinusoidal_pe(2, 8).data[1, 3], math.cos(1 / 10000 ** (2 / 8)), places=12)

    def test_odd_width_rejected(self):
        with self.assertRaises(ConfigError):
            sinusoidal_pe(4, 7)


class ExactAttentionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.params = AttentionParams(8, 2, self.rng)

    def test_single_token_attends_to_itself(self):
        x = Tensor(self.rng.normal(size=(1, 8)))
        with no_grad():
            out, weights = exact_mhsa(x, self.params, return_weights=True)
        for w in weights:
            np.testing.assert_array_equal(w, [[1.0]])
        np.testing.assert_allclose(out.data, x.data @ self.params.w_v.data @ self.params.w_o.data, atol=1e-12)

    def test_causal_first_row(self):
        x = Tensor(self.rng.normal(size=(2, 8)))
        with no_grad():
            _, weights = exact_mhsa(x, self.params, causal_mask=True, return_weights=True)
        for w in weights:
            np.testing.assert_array_equal(w[0], [1.0, 0.0])

    def test_masked_weights_are_exactly_zero(self):
        x = Tensor(self.rng.normal(size=(5, 8)))
        with no_grad():
            _, weights = exact_mhsa(x, self.params, causal_mask=True, return_weights=True)
        for w in weights:
            self.assertTrue(np.all(w[np.triu_indices(5, 1)] == 0.0))

    def test_future_tokens_never_change_past_rows(self):
        x = self.rng.normal(size=(5, 8))
        changed = x.copy()
        changed[3:] = self.rng.normal(size=(2, 8))
        with no_grad():
            a = exact_mhsa(Tensor(x), self.params, causal_mask=True).data
            b = exact_mhsa(Tensor(changed), self.params, causal_mask=True).data
        np.testing.assert_array_equal(a[:3], b[:3])

    def test_permutation_equivariance(self):
        x = self.rng.normal(size=(6, 8))
        perm = self.rng.permutation(6)
        with no_grad():
            out = exact_mhsa(Tensor(x), self.params).data
            permuted = exact_mhsa(Tensor(x[perm]), self.params).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-9)

    def test_gradients(self):
        x = Tensor(self.rng.normal(size=(4, 8)), requires_grad=True)
        w = Tensor(self.rng.normal(size=(4, 8)))
        tensors = {"x": x, **self.params.parameters()}
        report = check_gradients(lambda: ops.sum(exact_mhsa(x, self.params, causal_mask=True) * w), tensors)
        self.assertTrue(report.passed, report.failures)


class CrossAttentionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.params = AttentionParams(8, 2, self.rng)

    def test_single_key(self):
        h = Tensor(self.rng.normal(size=(3, 8)))
        v = self.rng.normal(size=(1, 8))
        with no_grad():
            out = mhca(h, Tensor(v), self.params).data
        expected = v @ self.params.w_v.data @ self.params.w_o.data
        np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_duplicated_keys(self):
        h = Tensor(self.rng.normal(size=(2, 8)))
        v = self.rng.normal(size=(1, 8))
        with no_grad():
            single = mhca(h, Tensor(v), self.params).data
            doubled = mhca(h, Tensor(np.repeat(v, 4, axis=0)), self.params).data
        np.testing.assert_allclose(doubled, single, atol=1e-12)

    def test_key_permutation_invariance(self):
        h = Tensor(self.rng.normal(size=(3, 8)))
        v = self.rng.normal(size=(7, 8))
        with no_grad():
            a = mhca(h, Tensor(v), self.params).data
            b = mhca(h, Tensor(v[self.rng.permutation(7)]), self.params).data
        np.testing.assert_allclose(a, b, atol=1e-9)


class IterativePinvTests(SimpleTestCase):
    def test_identity(self):
        with no_grad():
            z = iterative_pinv(Tensor(np.eye(4))).data
        np.testing.assert_allclose(z, np.eye(4), atol=1e-15)

    def test_rank_one_kernel(self):
        a = 0.5 * np.ones((2, 2))
        with no_grad():
            z = iterative_pinv(Tensor(a)).data
        np.testing.assert_allclose(a @ z @ a, a, atol=1e-12)

    def test_random_kernels_converge_in_six_iterations(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(8, 33))
            a = softmax_rows(6.0 * np.eye(m) + rng.normal(size=(m, m)))
            with no_grad():
                z = iterative_pinv(Tensor(a), 6).data
            self.assertLessEqual(pinv_residual(a, z), 1e-3, f"seed {seed}, m={m}")

    def test_residual_never_increases(self):
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            m = int(rng.integers(4, 17))
            a = softmax_rows(rng.normal(scale=2.0, size=(m, m)))
            with no_grad():
                residuals = [pinv_residual(a, iterative_pinv(Tensor(a), k).data) for k in range(1, 9)]
            for earlier, later in zip(residuals, residuals[1:]):
                self.assertLessEqual(later, earlier + 1e-12, f"seed {seed}: {residuals}")

    def test_batched_kernels(self):
        rng = np.random.default_rng(3)
        a = np.stack([softmax_rows(6.0 * np.eye(5) + rng.normal(size=(5, 5))) for _ in range(3)])
        with no_grad():
            z = iterative_pinv(Tensor(a)).data
        for head in range(3):
            self.assertLessEqual(pinv_residual(a[head], z[head]), 1e-3)


class NystromAttentionTests(SimpleTestCase):
    def test_single_token(self):
        rng = np.random.default_rng(0)
        params = AttentionParams(8, 2, rng)
        x = rng.normal(size=(1, 8))
        with no_grad():
            out = nystrom_attention(Tensor(x), NystromConfig(1, 2), params).data
        np.testing.assert_allclose(out, x @ params.w_v.data @ params.w_o.data, atol=1e-12)

    def test_singleton_segments_match_exact_attention(self):
        rng = np.random.default_rng(1)
        params = AttentionParams(8, 1, rng)
        params.w_q.data = 2.0 * np.eye(8)
        params.w_k.data = 2.0 * np.eye(8)
        x = Tensor(2.0 * np.eye(8) + 0.1 * rng.normal(size=(8, 8)))
        with no_grad():
            approx = nystrom_attention(x, NystromConfig(8, 1, pinv_iterations=10), params).data
            exact = exact_mhsa(x, params).data
        self.assertLessEqual(rel_frobenius(approx, exact), 1e-6)

    def test_singleton_segments_with_random_weights_depend_on_iterations(self):
        for seed in range(5):
            rng = np.random.default_rng(20 + seed)
            params = AttentionParams(8, 2, rng)
            x = Tensor(rng.normal(size=(8, 8)))
            with no_grad():
                exact = exact_mhsa(x, params).data
                errors = {k: rel_frobenius(nystrom_attention(x, NystromConfig(8, 2, pinv_iterations=k), params).data,
                                           exact)
                          for k in (DEFAULT_PINV_ITERATIONS, 20)}
            self.assertLess(errors[DEFAULT_PINV_ITERATIONS], 0.1, f"seed {seed}: {errors}")
            self.assertLess(errors[20], 1e-6, f"seed {seed}: {errors}")
            self.assertLessEqual(errors[20], errors[DEFAULT_PINV_ITERATIONS])

    def test_long_sequence_close_to_exact(self):
        rng = np.random.default_rng(0)
        params = AttentionParams(64, 4, rng)
        x = Tensor(1.0 + rng.normal(size=(128, 64)))
        with no_grad():
            approx = nystrom_attention(x, NystromConfig(32, 4), params).data
            exact = exact_mhsa(x, params).data
        self.assertLess(rel_frobenius(approx, exact), 0.15)

    def test_padding_rows_are_dropped(self):
        rng = np.random.default_rng(2)
        params = AttentionParams(8, 2, rng)
        self.assertEqual(padding_for(10, 4), 2)
        with no_grad():
            out = nystrom_attention(Tensor(rng.normal(size=(10, 8))), NystromConfig(4, 2), params)
        self.assertEqual(out.shape, (10, 8))

    def test_more_landmarks_than_tokens(self):
        rng = np.random.default_rng(4)
        params = AttentionParams(8, 2, rng)
        self.assertEqual(padding_for(3, 4), 1)
        with no_grad():
            out = nystrom_attention(Tensor(rng.normal(size=(3, 8))), NystromConfig(4, 2), params).data
        self.assertEqual(out.shape, (3, 8))
        self.assertTrue(np.all(np.isfinite(out)))

    def test_mismatched_head_count(self):
        params = AttentionParams(8, 2, np.random.default_rng(0))
        with self.assertRaises(ConfigError):
            nystrom_attention(Tensor(np.ones((3, 8))), NystromConfig(2, 4), params)

    def test_default_landmarks_follow_length(self):
        self.assertEqual(NystromConfig.for_length(10, 2).num_landmarks, 10)
        self.assertEqual(NystromConfig.for_length(500, 2).num_landmarks, 64)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        params = AttentionParams(8, 2, rng)
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 8)))
        tensors = {"x": x, **params.parameters()}
        report = check_gradients(lambda: ops.sum(nystrom_attention(x, NystromConfig(2, 2), params) * w), tensors)
        self.assertTrue(report.passed, report.failures)
