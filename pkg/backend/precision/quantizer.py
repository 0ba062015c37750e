"""
Learnable-step fake quantization of weights and activations, and stochastic
quantization of activation gradients.

A layer's precision is a continuous parameter beta in [b_min/N, 1]; its
bit-width is Round(beta * N). The step size over a tensor's dynamic range is

    s = R / (2^bits - 1)

and a tensor x is snapped onto the affine grid {z, z + s, ..., z + (2^bits - 1) s}
with z = min(x). Gradients pass straight through the rounding (zeroed outside
the grid's range) and reach beta through the step size, using the smooth
surrogate bits ~= beta * N.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import record_op
from .exceptions import RangeError, ShapeError

logger = logging.getLogger(__name__)

RANGE_FLOOR = 1e-8
# slack, in grid steps, for elements that land on the grid edge up to rounding error
EDGE_TOLERANCE = 1e-6
GRADIENT_RANGE_FLOOR = 1e-12
FULL_PRECISION_BITS = 32


def round_half_away(values):
    """Round to nearest integer, ties away from zero."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass
class PrecisionParam:
    """The learnable precision of one quantized layer."""
    layer_id: int
    n: int = 8
    b_min: int = 3
    b_max: int = 8
    beta: float = 1.0
    lr_beta: float = 0.1
    name: str = ''
    grad: float = 0.0

    def __post_init__(self):
        if self.b_min < 2:
            raise RangeError(f"b_min must be >= 2, got {self.b_min}")
        if self.b_max != self.n:
            raise RangeError(f"b_max ({self.b_max}) must equal n ({self.n})")
        if self.b_min > self.b_max:
            raise RangeError(f"b_min ({self.b_min}) exceeds b_max ({self.b_max})")
        if not self.lower <= self.beta <= 1:
            raise RangeError(f"beta must lie in [{self.lower}, 1], got {self.beta}")

    @property
    def lower(self):
        return self.b_min / self.n

    def zero_grad(self):
        self.grad = 0.0


def bits_of(p: PrecisionParam) -> int:
    """Round(beta * N) clamped to [b_min, b_max]."""
    bits = int(round_half_away(p.beta * p.n))
    return min(max(bits, p.b_min), p.b_max)


def surrogate_step(beta, n, r_range):
    """Step size on the continuous bit-width beta * N (no rounding)."""
    return r_range / (2.0 ** (beta * n) - 1.0)


def step_size(p: PrecisionParam, r_range, bits=None):
    """
    Return (s, ds/dbeta).

    s uses the rounded bit-width (or `bits` when a schedule forces one);
    ds/dbeta differentiates the smooth surrogate at beta * N.
    """
    if not r_range > 0:
        raise RangeError(f"dynamic range must be positive, got {r_range}")
    bits = bits_of(p) if bits is None else bits
    s = r_range / (2.0 ** bits - 1.0)
    b_tilde = p.beta * p.n
    power = 2.0 ** b_tilde
    ds_dbeta = -r_range * p.n * math.log(2.0) * power / (power - 1.0) ** 2
    return s, ds_dbeta


@dataclass
class QuantCache:
    """What the backward pass of one fake_quantize call needs."""
    v: np.ndarray
    r: np.ndarray
    s: float
    z: float
    in_range_mask: np.ndarray
    ds_dbeta: float
    levels: int
    above_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.v.shape


def quantize_array(values, s, z, levels):
    """Snap `values` onto {z + k s : k = 0..levels}. Returns (x_hat, v, r)."""
    v = (values - z) / s
    r = round_half_away(np.clip(v, 0, levels))
    x_hat = (s * r + z).astype(values.dtype)
    return x_hat, v, r


def fake_quantize(x, p: PrecisionParam, bits=None, track_beta=True):
    """
    Quantize-dequantize `x` at the layer's precision.

    Returns (x_hat, cache). Inside an active tape the backward pass routes the
    straight-through gradient to `x` and, when `track_beta` is set, adds the
    step-size gradient to `p.grad`.
    """
    if x.size == 0:
        raise ShapeError("cannot quantize an empty tensor")
    bits = bits_of(p) if bits is None else int(bits)
    values = x.data
    z = float(values.min())
    r_range = max(float(values.max()) - z, RANGE_FLOOR)
    s, ds_dbeta = step_size(p, r_range, bits)
    levels = 2 ** bits - 1

    x_hat, v, r = quantize_array(values, s, z, levels)
    cache = QuantCache(
        v=v,
        r=r,
        s=s,
        z=z,
        in_range_mask=(v >= -EDGE_TOLERANCE) & (v <= levels + EDGE_TOLERANCE),
        ds_dbeta=ds_dbeta,
        levels=levels,
        above_mask=v > levels + EDGE_TOLERANCE,
    )

    def grad_fn(upstream):
        dx, dbeta = fake_quantize_backward(upstream, cache)
        if track_beta:
            p.grad += dbeta
        return dx,

    out = record_op('fake_quantize', x_hat, (x,), grad_fn, force=track_beta)
    return out, cache


def fake_quantize_backward(upstream, cache: QuantCache):
    """
    Straight-through gradient for x and the step-size gradient for beta.

    Per element, d x_hat / d s is (r - v) inside the grid's range, 0 below it
    and 2^bits - 1 above it.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != cache.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match input shape {cache.shape}")
    mask = cache.in_range_mask
    above = cache.above_mask if cache.above_mask is not None else cache.v > cache.levels
    dx = np.where(mask, upstream, 0).astype(upstream.dtype)
    d_step = np.where(mask, cache.r - cache.v, np.where(above, float(cache.levels), 0.0))
    dbeta = float(np.sum(upstream.astype(np.float64) * d_step)) * cache.ds_dbeta
    return dx, dbeta


@dataclass(frozen=True)
class GradQuantSpec:
    bits: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if self.bits < 2:
            raise RangeError(f"gradient bits must be >= 2, got {self.bits}")


def stochastic_round(v, rng):
    """floor(v) with probability 1 - frac(v), else ceil(v); unbiased."""
    floor = np.floor(v)
    return floor + (rng.random(np.shape(v)) < (v - floor))


def quantize_gradient(g, spec: GradQuantSpec, rng):
    """Stochastically round `g` onto a per-tensor min/max grid of 2^bits levels."""
    g = np.asarray(g)
    if g.size == 0:
        raise ShapeError("cannot quantize an empty gradient")
    low = float(g.min())
    r_range = float(g.max()) - low
    if r_range < GRADIENT_RANGE_FLOOR:
        return g.copy()
    top = 2.0 ** spec.bits - 1.0
    s = r_range / top
    levels = np.clip(stochastic_round((g - low) / s, rng), 0.0, top)
    return (s * levels + low).astype(g.dtype)


def quantize_backward_gradients(x, spec: GradQuantSpec, rng):
    """Identity in the forward pass; quantizes the gradient flowing back through `x`."""
    if spec.bits >= FULL_PRECISION_BITS:
        return x
    return record_op('quantize_gradient', x.data, (x,), lambda g: (quantize_gradient(g, spec, rng),))


def beta_sgd_step(p: PrecisionParam, g_total):
    """beta <- clamp(beta - lr * g, b_min / N, 1). No momentum."""
    p.beta = float(min(max(p.beta - p.lr_beta * g_total, p.lower), 1.0))
    return p
