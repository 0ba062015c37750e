"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves on the active Tape (see `Tape.__enter__`) when at
least one input requires a gradient. `backward(loss)` walks the tape once, in
reverse recording order, and accumulates gradients into every reachable tensor
that requires one. Calling it twice without clearing `.grad` accumulates.

float32 is the default dtype. Tensors created with an explicit dtype keep it
through every operation, which is what the float64 gradient checks rely on.
"""
import itertools
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import AutodiffError, OptimizerError, RangeError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_active_tape: ContextVar[Optional['Tape']] = ContextVar('active_tape', default=None)


class Tensor:
    """A dense row-major array plus an optional same-shape gradient."""

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.tape = None
        self.id = next(_ids)

    @classmethod
    def wrap(cls, array, requires_grad=False):
        """Wrap a computed array without changing its dtype."""
        return cls(array, requires_grad=requires_grad, dtype=array.dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} id={self.id} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"


@dataclass(frozen=True)
class Node:
    """One recorded operation: which tensors went in, which came out, how to go back."""
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable = field(repr=False)


class Tape:
    """Ordered record of operations. Use as a context manager to make it active."""

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, op, inputs, output, backward):
        output.tape = self
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss):
        if loss.size != 1:
            raise AutodiffError(f"backward needs a scalar root, got shape {loss.shape}")
        if loss.tape is not self:
            raise AutodiffError("loss was not produced on this tape")

        pending = {loss.id: np.ones_like(loss.data)}
        owners = {loss.id: loss}
        for node in reversed(self.nodes):
            upstream = pending.pop(node.output.id, None)
            if upstream is None:
                continue
            _accumulate(node.output, upstream)
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise AutodiffError(
                        f"{node.op} produced a gradient of shape {grad.shape} for an input of shape {tensor.shape}"
                    )
                owners[tensor.id] = tensor
                pending[tensor.id] = pending[tensor.id] + grad if tensor.id in pending else grad

        # whatever is left never appeared as a node output: leaves
        for tensor_id, grad in pending.items():
            _accumulate(owners[tensor_id], grad)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = grad.astype(tensor.dtype, copy=False)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def active_tape():
    return _active_tape.get()


def record_op(op, value, inputs, backward, force=False):
    """
    Wrap `value` as the output of `op` and put it on the active tape.

    The node is recorded when an input requires a gradient, or when `force` is
    set (ops with side-channel gradients, e.g. a learnable step size).
    """
    out = Tensor.wrap(value)
    tape = _active_tape.get()
    if tape is not None and (force or any(t.requires_grad for t in inputs)):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def backward(loss):
    """Populate `.grad` of everything `loss` depends on."""
    if loss.tape is None:
        raise AutodiffError("loss was not produced on a tape; run the forward pass inside `with Tape():`")
    loss.tape.backward(loss)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value), dtype=like.dtype)


# Primitives

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return record_op('matmul', av @ bv, (a, b), grad_fn)


def add(a, b):
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return record_op('add', a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x, bias):
    """Add a per-feature (2-D) or per-channel (4-D) bias along axis 1."""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit input of shape {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def grad_fn(g):
        return g, g.sum(axis=reduce_axes)

    return record_op('add_bias', x.data + bias.data.reshape(view), (x, bias), grad_fn)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.data, b.data
    return record_op('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(x):
    mask = x.data > 0
    return record_op('relu', np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tensor_sum(x):
    shape = x.shape
    return record_op('sum', np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean(x):
    shape, n = x.shape, x.size
    return record_op('mean', np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),))


def reshape(x, shape):
    original = x.shape
    return record_op('reshape', x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return record_op('transpose', np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w)).astype(g.dtype),

    return record_op('global_avg_pool', x.data.mean(axis=(2, 3)), (x,), grad_fn)


def conv_output_size(size, kernel, stride, pad):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    padded = size + 2 * pad
    if kernel > padded:
        raise ShapeError(f"kernel {kernel} larger than padded input {padded}")
    if (padded - kernel) % stride:
        raise ShapeError(f"(size {size} + 2*pad {pad} - kernel {kernel}) is not divisible by stride {stride}")
    return (padded - kernel) // stride + 1


def _patch_indices(channels, height, width, kh, kw, stride, pad):
    out_h = conv_output_size(height, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)
    k = np.repeat(np.arange(channels), kh * kw).reshape(-1, 1)
    i0 = np.tile(np.repeat(np.arange(kh), kw), channels)
    j0 = np.tile(np.arange(kw), kh * channels)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    return k, i, j, out_h, out_w


def im2col(x, kh, kw, stride=1, pad=0):
    """
    Flatten every receptive field of `x` (N x C x H x W) into one row.

    Returns an (N*H'*W') x (C*kh*kw) tensor whose columns are ordered
    channel-major, then kernel row, then kernel column, matching
    `w.reshape(F, C*kh*kw)`.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"im2col expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    k, i, j, out_h, out_w = _patch_indices(c, h, w, kh, kw, stride, pad)
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = padded[:, k, i, j]
    cols = patches.transpose(0, 2, 1).reshape(n * out_h * out_w, c * kh * kw)

    def grad_fn(g):
        grad_patches = g.reshape(n, out_h * out_w, c * kh * kw).transpose(0, 2, 1)
        grad_padded = np.zeros(padded.shape, dtype=g.dtype)
        np.add.at(grad_padded, (slice(None), k, i, j), grad_patches)
        return grad_padded[:, :, pad:pad + h, pad:pad + w],

    return record_op('im2col', np.ascontiguousarray(cols), (x,), grad_fn)


def conv2d(x, w, stride=1, pad=0):
    """Zero-padded cross-correlation, lowered to im2col followed by matmul."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, width = x.shape
    f, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    out_h = conv_output_size(h, kh, stride, pad)
    out_w = conv_output_size(width, kw, stride, pad)

    cols = im2col(x, kh, kw, stride, pad)
    kernel = transpose(reshape(w, (f, c * kh * kw)), (1, 0))
    out = matmul(cols, kernel)
    return transpose(reshape(out, (n, out_h, out_w, f)), (0, 3, 1, 2))


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, channels, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_VARIANCE_FLOOR = 1e-5


def batch_norm(x, gamma, beta, state, training):
    """
    Per-channel normalization over every axis but 1.

    Training mode normalizes with batch statistics and folds them into the
    running statistics (`running = momentum * running + (1 - momentum) * batch`);
    eval mode uses the running statistics. Variance is floored at 1e-5.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects N x C or N x C x H x W, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    view = (1, channels) + (1,) * (x.data.ndim - 2)
    xv = x.data

    if training:
        if x.shape[0] == 1:
            raise ShapeError("batch_norm in training mode needs a batch of at least 2 samples")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)

    floored = var < BN_VARIANCE_FLOOR
    var = np.maximum(var, BN_VARIANCE_FLOOR).astype(xv.dtype)
    inv_std = 1.0 / np.sqrt(var)
    x_hat = (xv - mu.reshape(view)) * inv_std.reshape(view)
    out = x_hat * gamma.data.reshape(view) + beta.data.reshape(view)
    count = xv.size // channels
    gamma_v = gamma.data

    def grad_fn(g):
        d_gamma = (g * x_hat).sum(axis=axes)
        d_beta = g.sum(axis=axes)
        d_xhat = g * gamma_v.reshape(view)
        if not training:
            return d_xhat * inv_std.reshape(view), d_gamma, d_beta
        mean_dxhat = d_xhat.mean(axis=axes).reshape(view)
        mean_dxhat_xhat = (d_xhat * x_hat).mean(axis=axes).reshape(view)
        # floored channels have a constant variance, so only the mean term flows back
        variance_term = np.where(floored.reshape(view), 0, x_hat * mean_dxhat_xhat)
        d_x = inv_std.reshape(view) * (d_xhat - mean_dxhat - variance_term)
        return d_x.astype(g.dtype), d_gamma, d_beta

    logger.debug(f"batch_norm over {count} values per channel, training={training}")
    return record_op('batch_norm', out.astype(xv.dtype), (x, gamma, beta), grad_fn)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise RangeError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1
        return (d * (g / n)).astype(logits.dtype),

    return record_op('softmax_cross_entropy', np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


# Optimizer

@dataclass(frozen=True)
class SGDHyper:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its momentum buffer."""
    value: Tensor
    name: str
    velocity: Optional[np.ndarray] = None
    hyper: Optional[SGDHyper] = None

    @classmethod
    def create(cls, array, name, dtype=DEFAULT_DTYPE):
        return cls(Tensor(array, requires_grad=True, dtype=dtype, name=name), name)

    @property
    def grad(self):
        return self.value.grad


def sgd_step(params: Sequence[Parameter], hyper: SGDHyper):
    """
    v <- momentum * v + grad + wd * w;  w <- w - lr * v;  then zero the grads.

    A parameter's own `hyper` overrides the shared one.
    """
    for param in params:
        grad = param.value.grad
        if grad is None:
            raise OptimizerError(f"parameter '{param.name}' has no gradient; run backward first")
        h = param.hyper or hyper
        w = param.value.data
        step = grad + h.weight_decay * w
        if param.velocity is None:
            param.velocity = np.zeros_like(w)
        if param.velocity.shape != w.shape:
            raise ShapeError(f"velocity of '{param.name}' has shape {param.velocity.shape}, value {w.shape}")
        param.velocity = (h.momentum * param.velocity + step).astype(w.dtype)
        param.value.data = (w - h.lr * param.velocity).astype(w.dtype)
        param.value.grad = np.zeros_like(w)
    return params
