import numpy as np
from django.test import SimpleTestCase

from precision.autodiff import (
    BN_VARIANCE_FLOOR,
    BatchNormState,
    Parameter,
    SGDHyper,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    batch_norm,
    conv2d,
    flatten,
    global_avg_pool,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sgd_step,
    softmax_cross_entropy,
    tensor_sum,
    transpose,
)
from precision.exceptions import AutodiffError, OptimizerError, RangeError, ShapeError
from precision.networks import MLP, ForwardContext

F64 = np.float64


def numeric_grad(fn, arrays, index, h=1e-3):
    """Central differences of the scalar fn(*arrays) with respect to arrays[index]."""
    target = arrays[index]
    grad = np.zeros_like(target)
    for pos in np.ndindex(target.shape):
        saved = target[pos]
        target[pos] = saved + h
        plus = fn(*arrays)
        target[pos] = saved - h
        minus = fn(*arrays)
        target[pos] = saved
        grad[pos] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8)


def projected(build):
    """Reduce build(*tensors) to a scalar with a fixed random projection."""
    weights = {}

    def loss(*tensors):
        out = build(*tensors)
        if out.size == 1:
            return out
        if out.shape not in weights:
            weights[out.shape] = np.random.default_rng(99).uniform(-1, 1, out.shape)
        return tensor_sum(mul(out, Tensor(weights[out.shape], dtype=F64)))

    return loss


class GradientCheckMixin:

    def assertGradientsMatch(self, build, *arrays, tolerance=1e-3, h=1e-3):
        loss_fn = projected(build)
        arrays = [np.array(a, dtype=F64) for a in arrays]

        def value(*values):
            return loss_fn(*[Tensor(v, dtype=F64) for v in values]).item()

        tensors = [Tensor(a.copy(), requires_grad=True, dtype=F64) for a in arrays]
        with Tape():
            loss = loss_fn(*tensors)
        backward(loss)
        for i, tensor in enumerate(tensors):
            numeric = numeric_grad(value, arrays, i, h)
            error = max_relative_error(tensor.grad, numeric)
            self.assertLess(error, tolerance, f"input {i}: relative error {error}")


class ExampleValueTests(SimpleTestCase):

    def test_matmul_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_matmul_row_by_column(self):
        np.testing.assert_array_equal(matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])

    def test_matmul_shape_error_names_both_shapes(self):
        with self.assertRaisesMessage(ShapeError, '(2, 3) x (2, 3)'):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_of_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        self.assertEqual(out.shape, (1, 1, 1, 1))
        self.assertEqual(out.item(), 9.0)

    def test_conv_zero_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
        out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), stride=1, pad=1)
        self.assertEqual(out.shape, (2, 4, 5, 5))
        self.assertFalse(out.data.any())

    def test_conv_rejects_non_integral_output(self):
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=0)

    def test_conv_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (2, 3, 6, 6))
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        stride, pad = 1, 1
        out = conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), stride, pad).data
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        expected = np.zeros_like(out)
        for n in range(2):
            for f in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = padded[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        expected[n, f, i, j] = np.sum(patch * w[f])
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_add_zero_is_identity(self):
        x = Tensor([1.5, -2.0, 3.25])
        np.testing.assert_array_equal(add(x, 0).data, x.data)

    def test_add_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_softmax_cross_entropy_uniform(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 4)), dtype=F64), np.array([0, 1, 3]))
        self.assertAlmostEqual(loss.item(), np.log(4), places=6)

    def test_softmax_cross_entropy_confident(self):
        logits = np.array([[1000.0, 0.0, 0.0]])
        self.assertLess(softmax_cross_entropy(Tensor(logits, dtype=F64), np.array([0])).item(), 1e-12)

    def test_softmax_cross_entropy_label_range(self):
        with self.assertRaises(RangeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_batch_norm_constant_channel(self):
        x = np.ones((4, 3, 2, 2)) * np.array([1.0, -2.0, 5.0]).reshape(1, 3, 1, 1)
        beta = np.array([0.1, 0.2, 0.3])
        out = batch_norm(Tensor(x, dtype=F64), Tensor(np.ones(3), dtype=F64), Tensor(beta, dtype=F64),
                         BatchNormState.create(3, F64), training=True)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape))

    def test_batch_norm_standardized_input(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(64, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        out = batch_norm(Tensor(x, dtype=F64), Tensor(np.ones(3), dtype=F64), Tensor(np.zeros(3), dtype=F64),
                         BatchNormState.create(3, F64), training=True)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_batch_norm_running_stats(self):
        x = np.array([[1.0], [3.0]])
        state = BatchNormState.create(1, F64)
        batch_norm(Tensor(x, dtype=F64), Tensor(np.ones(1), dtype=F64), Tensor(np.zeros(1), dtype=F64), state, True)
        np.testing.assert_allclose(state.running_mean, [0.2])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 1.0])

    def test_batch_norm_eval_uses_running_stats(self):
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        out = batch_norm(Tensor([[5.0]], dtype=F64), Tensor(np.ones(1), dtype=F64), Tensor(np.zeros(1), dtype=F64),
                         state, training=False)
        self.assertAlmostEqual(out.item(), 2.0)

    def test_batch_norm_rejects_single_sample_in_training(self):
        with self.assertRaises(ShapeError):
            batch_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       BatchNormState.create(2), training=True)

    def test_variance_floor_value(self):
        self.assertEqual(BN_VARIANCE_FLOOR, 1e-5)


class BackwardTests(SimpleTestCase):

    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(mul(x, y))
        backward(loss)
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)

    def test_mean_gradient(self):
        x = Tensor(np.ones(8), requires_grad=True)
        with Tape():
            loss = mean(x)
        backward(loss)
        np.testing.assert_allclose(x.grad, np.full(8, 1 / 8))

    def test_add_gradient_independent_of_other_operand(self):
        grads = []
        for other in (np.zeros(3), np.full(3, 7.0)):
            a = Tensor(np.ones(3), requires_grad=True)
            with Tape():
                loss = tensor_sum(add(a, Tensor(other)))
            backward(loss)
            grads.append(a.grad)
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_unreachable_tensor_untouched(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
            relu(unused)
        backward(loss)
        self.assertIsNone(unused.grad)

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            out = relu(x)
        with self.assertRaises(AutodiffError):
            backward(out)

    def test_loss_off_tape(self):
        with self.assertRaises(AutodiffError):
            backward(tensor_sum(Tensor(np.ones(3), requires_grad=True)))

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            tensor_sum(relu(matmul(x, x)))
        produced = set()
        for node in tape.nodes:
            for tensor in node.inputs:
                if tensor.tape is tape:
                    self.assertIn(tensor.id, produced)
            produced.add(node.output.id)

    def test_determinism(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            with Tape():
                loss = mean(relu(matmul(x, w)))
            backward(loss)
            results.append((loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()))
        self.assertEqual(results[0], results[1])


class FiniteDifferenceTests(GradientCheckMixin, SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def uniform(self, *shape):
        return self.rng.uniform(-1, 1, shape)

    def away_from_zero(self, *shape):
        values = self.uniform(*shape)
        return np.where(np.abs(values) < 0.05, 0.5, values)

    def test_matmul(self):
        self.assertGradientsMatch(matmul, self.uniform(4, 5), self.uniform(5, 3))

    def test_add_and_mul(self):
        self.assertGradientsMatch(lambda a, b: mul(add(a, b), b), self.uniform(3, 4), self.uniform(3, 4))

    def test_add_bias(self):
        self.assertGradientsMatch(add_bias, self.uniform(2, 3, 2, 2), self.uniform(3))

    def test_relu(self):
        self.assertGradientsMatch(relu, self.away_from_zero(4, 5))

    def test_mean(self):
        self.assertGradientsMatch(mean, self.uniform(3, 7))

    def test_reshape_flatten_transpose(self):
        self.assertGradientsMatch(lambda x: transpose(reshape(flatten(x), (2, 12)), (1, 0)), self.uniform(2, 3, 2, 2))

    def test_global_avg_pool(self):
        self.assertGradientsMatch(global_avg_pool, self.uniform(2, 3, 4, 4))

    def test_conv2d(self):
        self.assertGradientsMatch(lambda x, w: conv2d(x, w, 1, 1), self.uniform(2, 3, 8, 8), self.uniform(4, 3, 3, 3))

    def test_strided_conv2d(self):
        self.assertGradientsMatch(lambda x, w: conv2d(x, w, 2, 1), self.uniform(2, 2, 6, 6), self.uniform(3, 2, 4, 4))

    def test_batch_norm_training(self):
        state = BatchNormState.create(3, F64)
        self.assertGradientsMatch(lambda x, g, b: batch_norm(x, g, b, state, True),
                                  self.uniform(4, 3, 2, 2), self.uniform(3) + 1.5, self.uniform(3))

    def test_batch_norm_eval(self):
        state = BatchNormState(np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0]))
        self.assertGradientsMatch(lambda x, g, b: batch_norm(x, g, b, state, False),
                                  self.uniform(4, 3), self.uniform(3), self.uniform(3))

    def test_softmax_cross_entropy(self):
        labels = self.rng.integers(0, 5, 8)
        self.assertGradientsMatch(lambda z: softmax_cross_entropy(z, labels), self.uniform(8, 5), tolerance=1e-4)

    def test_unquantized_mlp(self):
        net = MLP((4, 3, 3, 2), (4,), np.random.default_rng(3), dtype=F64)
        x = Tensor(self.uniform(4, 4), dtype=F64)
        labels = self.rng.integers(0, 2, 4)
        params = net.parameters()
        ctx = ForwardContext()

        def loss_value():
            return softmax_cross_entropy(net.forward(x, ctx), labels).item()

        with Tape():
            loss = softmax_cross_entropy(net.forward(x, ctx), labels)
        backward(loss)
        for param in params:
            analytic = param.grad.copy()
            numeric = numeric_grad(lambda *_: loss_value(), [param.value.data], 0)
            self.assertLess(max_relative_error(analytic, numeric), 1e-3, param.name)


class SGDTests(SimpleTestCase):

    def param(self, value, grad):
        p = Parameter.create(np.array([value]), 'w', F64)
        p.value.grad = np.array([grad])
        return p

    def test_plain_step(self):
        p = self.param(1.0, 0.25)
        sgd_step([p], SGDHyper(lr=1.0, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(p.value.data, [0.75])
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_zero_gradient_keeps_weights(self):
        p = self.param(2.0, 0.0)
        sgd_step([p], SGDHyper(lr=0.1, momentum=0.9, weight_decay=0.0))
        np.testing.assert_array_equal(p.value.data, [2.0])

    def test_two_momentum_steps(self):
        hyper = SGDHyper(lr=0.1, momentum=0.9, weight_decay=0.01)
        p = self.param(1.0, 0.5)
        sgd_step([p], hyper)
        # v1 = 0.5 + 0.01 * 1 = 0.51; w1 = 1 - 0.051 = 0.949
        np.testing.assert_allclose(p.value.data, [0.949])
        p.value.grad = np.array([0.2])
        sgd_step([p], hyper)
        v2 = 0.9 * 0.51 + 0.2 + 0.01 * 0.949
        np.testing.assert_allclose(p.value.data, [0.949 - 0.1 * v2])
        np.testing.assert_allclose(p.velocity, [v2])

    def test_missing_gradient_names_parameter(self):
        p = Parameter.create(np.ones(2), 'fc1.weight')
        with self.assertRaisesMessage(OptimizerError, 'fc1.weight'):
            sgd_step([p], SGDHyper())
