"""
BitOPs accounting, the hinged cost loss and precision-gradient balancing.

A multiply-accumulate between a-bit and b-bit operands costs a*b BitOPs, so a
layer doing `macs` full-precision MACs costs O = macs * 32^2 and, at b bits for
both weights and activations, O * (b/32)^2 = macs * b^2.
"""
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .autodiff import conv_output_size
from .exceptions import CostModelError
from .quantizer import bits_of

logger = logging.getLogger(__name__)

FULL_BITS = 32
FULL_MAC_BITOPS = FULL_BITS ** 2

TRAIN_BITOPS_FORMULA = 'train_bitops = macs * (bits^2 + 2 * bits * bw_bits)'
FORWARD_ONLY_FORMULA = 'train_bitops = macs * bits^2'


@dataclass(frozen=True)
class LayerDescription:
    """
    Shape of one weight layer's GEMM for one forward pass.

    matmul: `dims` = (m, k, n). conv: `dims` = (N, C, H, W, F, kh, kw, stride, pad).
    """
    layer_id: int
    kind: str
    dims: tuple
    name: str = ''


@dataclass(frozen=True)
class LayerCost:
    layer_id: int
    macs: int
    name: str = ''

    @property
    def o_full(self):
        return self.macs * FULL_MAC_BITOPS


@dataclass
class CostState:
    c_current: float
    t_target: float
    t_frac: float
    cumulative_train_bitops: float = 0.0

    @property
    def hinge_active(self):
        return hinge_active(self.c_current, self.t_target)


@dataclass(frozen=True)
class BalanceConfig:
    alpha: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.alpha < 0:
            raise CostModelError(f"alpha must be >= 0, got {self.alpha}")
        if not self.epsilon > 0:
            raise CostModelError(f"epsilon must be > 0, got {self.epsilon}")


def layer_full_bitops(layer: LayerDescription) -> LayerCost:
    if layer.kind == 'matmul':
        m, k, n = layer.dims
        macs = m * k * n
    elif layer.kind == 'conv':
        batch, channels, height, width, filters, kh, kw, stride, pad = layer.dims
        out_h = conv_output_size(height, kh, stride, pad)
        out_w = conv_output_size(width, kw, stride, pad)
        macs = batch * filters * channels * kh * kw * out_h * out_w
    else:
        raise CostModelError(f"unsupported layer kind '{layer.kind}' for layer {layer.layer_id}")
    return LayerCost(layer.layer_id, int(macs), layer.name)


def _aligned(costs: Sequence[LayerCost], bits: Mapping[int, int]):
    missing = [c.layer_id for c in costs if c.layer_id not in bits]
    extra = set(bits) - {c.layer_id for c in costs}
    if missing or extra:
        raise CostModelError(f"bit-widths and layer costs are misaligned: missing {missing}, unexpected {sorted(extra)}")
    return [(c, bits[c.layer_id]) for c in costs]


def bitops_at_bits(bits: Mapping[int, int], costs: Sequence[LayerCost]) -> float:
    """Sum over layers of o_full * (b/32)^2, i.e. macs * b^2."""
    return float(sum(c.o_full * (b / FULL_BITS) ** 2 for c, b in _aligned(costs, bits)))


def forward_cost(precisions, costs: Sequence[LayerCost]) -> float:
    """C: the forward-pass BitOPs at the layers' current learned precisions."""
    if len(precisions) != len(costs):
        raise CostModelError(f"{len(precisions)} precision params for {len(costs)} layer costs")
    return bitops_at_bits({p.layer_id: bits_of(p) for p in precisions}, costs)


def inference_bitops(bits: Mapping[int, int], costs: Sequence[LayerCost]) -> float:
    return float(sum(c.macs * b * b for c, b in _aligned(costs, bits)))


def hinge_active(c, t):
    """True once C has reached the target T. T must be positive."""
    if not t > 0:
        raise CostModelError(f"cost target T must be > 0, got {t}")
    return c >= t


def cost_loss(c, t):
    """Hinge: 0 below the target, C at or above it."""
    return float(c) if hinge_active(c, t) else 0.0


def cost_grad(precisions, costs: Sequence[LayerCost], c, t) -> np.ndarray:
    """
    dL_cost/dbeta per layer on the smooth surrogate b = beta * N.

    Zero everywhere while C < T; otherwise o_full * 2 * (beta N) / 32^2 * N.
    """
    by_id = {cost.layer_id: cost for cost in costs}
    if len(precisions) != len(costs) or any(p.layer_id not in by_id for p in precisions):
        raise CostModelError("precision params and layer costs are misaligned")
    if not hinge_active(c, t):
        return np.zeros(len(precisions))
    return np.array([
        by_id[p.layer_id].o_full * 2.0 * (p.beta * p.n) / FULL_MAC_BITOPS * p.n
        for p in precisions
    ])


def balance(g_task, g_cost, cfg: BalanceConfig = BalanceConfig()) -> np.ndarray:
    """
    G = G_T + alpha * G_C * Mean(|G_T|) / (Mean(|G_C|) + eps), means taken
    across all layers of the network.
    """
    g_task = np.asarray(g_task, dtype=np.float64)
    g_cost = np.asarray(g_cost, dtype=np.float64)
    if g_task.shape != g_cost.shape:
        raise CostModelError(f"task gradients {g_task.shape} and cost gradients {g_cost.shape} differ in length")
    if not g_task.size:
        return g_task
    scale = np.mean(np.abs(g_task)) / (np.mean(np.abs(g_cost)) + cfg.epsilon)
    return g_task + cfg.alpha * g_cost * scale


def static_target(costs: Sequence[LayerCost], b_static=8, t_frac=0.6):
    """Return (T, T_stat) where T_stat is the cost of every layer at b_static bits."""
    if not 0 < t_frac <= 1:
        raise CostModelError(f"t_frac must lie in (0, 1], got {t_frac}")
    t_stat = bitops_at_bits({c.layer_id: b_static for c in costs}, costs)
    return t_frac * t_stat, t_stat


def _check_log(schedule, costs):
    if schedule.empty:
        raise CostModelError("schedule log is empty")
    layer_ids = sorted(c.layer_id for c in costs)
    iterations = np.sort(schedule['iteration'].unique())
    expected = np.arange(iterations[0], iterations[0] + len(iterations))
    if not np.array_equal(iterations, expected):
        gap = next(int(e) for i, e in zip(iterations, expected) if i != e)
        raise CostModelError(f"schedule log has a gap at iteration {gap}")
    per_iteration = schedule.groupby('iteration')['layer_id'].apply(lambda s: sorted(s.tolist()))
    for iteration, ids in per_iteration.items():
        if ids != layer_ids:
            raise CostModelError(f"schedule log iteration {iteration} covers layers {ids}, expected {layer_ids}")


def training_bitops_report(schedule: pd.DataFrame, costs: Sequence[LayerCost], bw_bits=8, include_backward=True):
    """
    Price every (iteration, layer) row of a schedule log.

    Training BitOPs per row are macs * (b^2 + 2 * b * bw_bits): one forward GEMM
    at b x b bits and two backward GEMMs at b x bw_bits. With
    `include_backward=False` only the forward term macs * b^2 is counted.
    """
    _check_log(schedule, costs)
    macs = {c.layer_id: c.macs for c in costs}
    report = schedule.sort_values(['iteration', 'layer_id'])[['iteration', 'layer_id', 'bits']].reset_index(drop=True)
    layer_macs = report['layer_id'].map(macs).astype(np.float64)
    bits = report['bits'].astype(np.float64)
    report['fwd_bitops'] = layer_macs * bits ** 2
    backward_term = 2 * bits * bw_bits if include_backward else 0.0
    report['train_bitops'] = layer_macs * (bits ** 2 + backward_term)
    report['cumulative_train_bitops'] = report['train_bitops'].cumsum()
    return report


def training_bitops_summary(report: pd.DataFrame, t_target, t_stat, t_frac, include_backward=True):
    per_iteration = report.groupby('iteration')[['fwd_bitops', 'train_bitops']].sum()
    return {
        'formula': TRAIN_BITOPS_FORMULA if include_backward else FORWARD_ONLY_FORMULA,
        'iterations': int(len(per_iteration)),
        'total_fwd_bitops': float(per_iteration['fwd_bitops'].sum()),
        'total_train_bitops': float(per_iteration['train_bitops'].sum()),
        'T': float(t_target),
        'T_stat': float(t_stat),
        't_frac': float(t_frac),
    }


def write_training_bitops_report(report: pd.DataFrame, path, include_backward=True):
    formula = TRAIN_BITOPS_FORMULA if include_backward else FORWARD_ONLY_FORMULA
    with open(path, 'w', newline='') as handle:
        handle.write(f"# {formula}\n")
        report.to_csv(handle, index=False)
    logger.info(f"Wrote training cost report ({len(report)} rows) to {path}")
