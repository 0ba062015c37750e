import math
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from precision.autodiff import Tape, Tensor, backward, matmul, mul, tensor_sum
from precision.exceptions import RangeError, ShapeError
from precision.quantizer import (
    GradQuantSpec,
    PrecisionParam,
    beta_sgd_step,
    bits_of,
    fake_quantize,
    fake_quantize_backward,
    quantize_array,
    quantize_backward_gradients,
    quantize_gradient,
    round_half_away,
    step_size,
    stochastic_round,
    surrogate_step,
)

F64 = np.float64


def param_for_bits(bits, n=8):
    return PrecisionParam(0, n=n, b_min=2, b_max=n, beta=bits / n)


class PrecisionParamTests(SimpleTestCase):

    def test_bits_of_examples(self):
        self.assertEqual(bits_of(PrecisionParam(0, beta=1.0)), 8)
        self.assertEqual(bits_of(PrecisionParam(0, beta=0.5)), 4)
        self.assertEqual(bits_of(PrecisionParam(0, beta=0.4375)), 4)

    def test_bits_of_is_monotone(self):
        p = PrecisionParam(0)
        previous = 0
        for beta in np.linspace(p.lower, 1.0, 200):
            p.beta = float(beta)
            bits = bits_of(p)
            self.assertGreaterEqual(bits, previous)
            self.assertTrue(p.b_min <= bits <= p.b_max)
            previous = bits

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5])), [1, 2, 3, -1, -2])

    def test_validation(self):
        with self.assertRaises(RangeError):
            PrecisionParam(0, n=8, b_max=6)
        with self.assertRaises(RangeError):
            PrecisionParam(0, beta=0.2)
        with self.assertRaises(RangeError):
            PrecisionParam(0, b_min=1)

    def test_beta_sgd_step(self):
        p = PrecisionParam(0, beta=0.5, lr_beta=0.1)
        beta_sgd_step(p, 0.0)
        self.assertEqual(p.beta, 0.5)
        beta_sgd_step(p, 1.0)
        self.assertAlmostEqual(p.beta, 0.4)

    def test_beta_sgd_step_projects(self):
        p = PrecisionParam(0, beta=0.39, lr_beta=0.1)
        beta_sgd_step(p, 1.0)
        self.assertEqual(p.beta, 0.375)
        p.beta = 0.99
        beta_sgd_step(p, -1.0)
        self.assertEqual(p.beta, 1.0)


class StepSizeTests(SimpleTestCase):

    def test_full_precision_step(self):
        s, _ = step_size(PrecisionParam(0, beta=1.0), 1.0)
        self.assertAlmostEqual(s, 1 / 255)

    def test_four_bit_step(self):
        s, _ = step_size(PrecisionParam(0, beta=0.5), 3.0)
        self.assertAlmostEqual(s, 0.2)

    def test_ds_dbeta_matches_surrogate_difference(self):
        p = PrecisionParam(0, beta=0.5)
        _, ds_dbeta = step_size(p, 3.0)
        h = 1e-5
        numeric = (surrogate_step(0.5 + h, 8, 3.0) - surrogate_step(0.5 - h, 8, 3.0)) / (2 * h)
        self.assertLess(abs(ds_dbeta - numeric) / abs(numeric), 1e-6)

    def test_non_positive_range(self):
        with self.assertRaises(RangeError):
            step_size(PrecisionParam(0), 0.0)


class FakeQuantizeTests(SimpleTestCase):

    def test_two_bit_example(self):
        x_hat, cache = fake_quantize(Tensor([0.0, 0.4, 1.0], dtype=F64), param_for_bits(2), bits=2)
        self.assertAlmostEqual(cache.s, 1 / 3)
        self.assertEqual(cache.z, 0.0)
        np.testing.assert_allclose(x_hat.data, [0, 1 / 3, 1], atol=1e-15)

    def test_constant_tensor_unchanged(self):
        x = Tensor(np.full(10, 2.5))
        x_hat, _ = fake_quantize(x, PrecisionParam(0))
        np.testing.assert_array_equal(x_hat.data, x.data)

    def test_empty_tensor(self):
        with self.assertRaises(ShapeError):
            fake_quantize(Tensor(np.zeros(0)), PrecisionParam(0))

    def test_matches_nearest_level_oracle(self):
        rng = np.random.default_rng(0)
        for bits in range(2, 9):
            p = param_for_bits(bits)
            for _ in range(100):
                x = rng.normal(size=1000)
                x_hat, cache = fake_quantize(Tensor(x, dtype=F64), p, bits=bits)
                levels = cache.s * np.arange(2 ** bits) + cache.z
                nearest = np.argmin(np.abs(x[:, None] - levels[None, :]), axis=1)
                np.testing.assert_array_equal(x_hat.data, levels[nearest])
                self.assertTrue(np.all(np.abs(x_hat.data - x) <= cache.s / 2 + 1e-12))
                again, _, _ = quantize_array(x_hat.data, cache.s, cache.z, cache.levels)
                np.testing.assert_array_equal(again, x_hat.data)

    def test_more_bits_never_increase_error(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(-1, 1, 1000)
            errors = [np.sum((fake_quantize(Tensor(x, dtype=F64), param_for_bits(b), bits=b)[0].data - x) ** 2)
                      for b in range(2, 9)]
            self.assertTrue(all(a >= b for a, b in zip(errors, errors[1:])), errors)

    def test_backward_on_grid(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        _, cache = fake_quantize(Tensor(x, dtype=F64), param_for_bits(2), bits=2)
        upstream = np.array([0.5, -1.0, 2.0, 0.25])
        dx, dbeta = fake_quantize_backward(upstream, cache)
        np.testing.assert_array_equal(dx, upstream)
        self.assertEqual(dbeta, 0.0)

    def test_backward_zero_upstream(self):
        _, cache = fake_quantize(Tensor(np.random.default_rng(2).normal(size=50), dtype=F64), PrecisionParam(0))
        dx, dbeta = fake_quantize_backward(np.zeros(50), cache)
        self.assertFalse(dx.any())
        self.assertEqual(dbeta, 0.0)

    def test_backward_shape_mismatch(self):
        _, cache = fake_quantize(Tensor(np.arange(4.0)), PrecisionParam(0))
        with self.assertRaises(ShapeError):
            fake_quantize_backward(np.zeros(5), cache)

    def test_dbeta_matches_surrogate_difference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=200)
        upstream = rng.normal(size=200)
        p = PrecisionParam(0, beta=0.55)
        _, cache = fake_quantize(Tensor(x, dtype=F64), p)
        _, dbeta = fake_quantize_backward(upstream, cache)
        r_range = x.max() - x.min()
        residual = cache.r - cache.v

        def surrogate(beta):
            # rounding held at its current output; only the step size moves
            return np.sum(upstream * (x + surrogate_step(beta, p.n, r_range) * residual))

        h = 1e-5
        numeric = (surrogate(p.beta + h) - surrogate(p.beta - h)) / (2 * h)
        self.assertLess(abs(dbeta - numeric) / abs(numeric), 1e-4)

    def test_beta_gradient_reaches_param_on_tape(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 4)), dtype=F64)
        weights = rng.normal(size=(3, 4))
        p = PrecisionParam(0, beta=0.75)
        with Tape():
            x_hat, cache = fake_quantize(x, p)
            loss = tensor_sum(mul(x_hat, Tensor(weights, dtype=F64)))
        backward(loss)
        _, expected = fake_quantize_backward(weights, cache)
        self.assertAlmostEqual(p.grad, expected)

    def test_untracked_beta_keeps_grad(self):
        x = Tensor(np.random.default_rng(5).normal(size=8), requires_grad=True)
        p = PrecisionParam(0)
        with Tape():
            x_hat, _ = fake_quantize(x, p, track_beta=False)
            loss = tensor_sum(x_hat)
        backward(loss)
        self.assertEqual(p.grad, 0.0)
        np.testing.assert_array_equal(x.grad, np.ones(8))

    def test_straight_through_on_grid_matches_unquantized(self):
        x = np.array([[0.0, 1.0, 2.0], [3.0, 2.0, 1.0]])
        w = np.array([[-1.0, 0.0], [1.0, 2.0], [2.0, -1.0]])
        p = param_for_bits(2)
        grads = []
        for quantized in (True, False):
            xt = Tensor(x, requires_grad=True, dtype=F64)
            wt = Tensor(w, requires_grad=True, dtype=F64)
            with Tape():
                a, b = (fake_quantize(xt, p, bits=2)[0], fake_quantize(wt, p, bits=2)[0]) if quantized else (xt, wt)
                loss = tensor_sum(mul(matmul(a, b), Tensor([[1.0, -2.0], [0.5, 3.0]], dtype=F64)))
            backward(loss)
            grads.append((xt.grad, wt.grad))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])


class GradientQuantizationTests(SimpleTestCase):

    def test_on_grid_gradient_is_fixed_point(self):
        g = np.array([0.0, 1.0, 2.0, 3.0, 1.0])
        for seed in range(10):
            out = quantize_gradient(g, GradQuantSpec(bits=2), np.random.default_rng(seed))
            np.testing.assert_array_equal(out, g)

    def test_constant_gradient_unchanged(self):
        g = np.full(6, -0.7)
        np.testing.assert_array_equal(quantize_gradient(g, GradQuantSpec(), np.random.default_rng(0)), g)

    def test_empty_gradient(self):
        with self.assertRaises(ShapeError):
            quantize_gradient(np.zeros(0), GradQuantSpec(), np.random.default_rng(0))

    def test_rounded_levels_stay_on_grid(self):
        g = np.random.default_rng(10).normal(size=50)
        with mock.patch('precision.quantizer.stochastic_round', side_effect=lambda v, rng: np.floor(v) + 1):
            out = quantize_gradient(g, GradQuantSpec(bits=3), np.random.default_rng(0))
        s = (g.max() - g.min()) / 7
        levels = (out - g.min()) / s
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-9)
        self.assertLessEqual(np.round(levels).max(), 7)
        self.assertGreaterEqual(np.round(levels).min(), 1)
        self.assertLessEqual(out.max(), g.max() + 1e-12)

    def test_spec_rejects_one_bit(self):
        with self.assertRaises(RangeError):
            GradQuantSpec(bits=1)

    def test_stochastic_round_is_unbiased(self):
        draws = stochastic_round(np.full(100000, 0.3), np.random.default_rng(6))
        self.assertTrue(set(np.unique(draws)) <= {0.0, 1.0})
        self.assertLess(abs(draws.mean() - 0.3), 0.01)

    def test_quantized_gradient_is_unbiased(self):
        g = np.concatenate([[0.0, 1.0], np.full(100000, 0.3)])
        out = quantize_gradient(g, GradQuantSpec(bits=2), np.random.default_rng(7))
        standard_error = (1 / 3) * math.sqrt(0.9 * 0.1) / math.sqrt(100000)
        self.assertLess(abs(out[2:].mean() - 0.3), 3 * standard_error + 1e-12)

    def test_backward_gradients_are_quantized(self):
        rng = np.random.default_rng(8)
        upstream = rng.normal(size=(4, 3))
        spec = GradQuantSpec(bits=4)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=F64)
        with Tape():
            y = quantize_backward_gradients(x, spec, np.random.default_rng(9))
            loss = tensor_sum(mul(y, Tensor(upstream, dtype=F64)))
        backward(loss)
        np.testing.assert_array_equal(y.data, x.data)
        np.testing.assert_array_equal(x.grad, quantize_gradient(upstream, spec, np.random.default_rng(9)))

    def test_full_precision_gradients_bypass(self):
        x = Tensor(np.ones(3), requires_grad=True)
        self.assertIs(quantize_backward_gradients(x, GradQuantSpec(bits=32), np.random.default_rng(0)), x)
