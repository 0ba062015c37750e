"""
Model builders: fake-quantized linear and convolution layers, a plain MLP and
a three-stage residual CNN.

Every weight layer gets a sequential layer id in forward order. Layers that
own a PrecisionParam are the quantized ones; by default the first and last
weight layers are exempt and run in full precision.
"""
import logging
from dataclasses import dataclass, field
from math import prod, sqrt
from typing import Mapping, Optional

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    BatchNormState,
    Parameter,
    add,
    add_bias,
    batch_norm,
    conv2d,
    conv_output_size,
    flatten,
    global_avg_pool,
    matmul,
    relu,
)
from .cost_model import LayerDescription, layer_full_bitops
from .exceptions import CheckpointError, ShapeError
from .quantizer import (
    FULL_PRECISION_BITS,
    GradQuantSpec,
    PrecisionParam,
    fake_quantize,
    quantize_backward_gradients,
)

logger = logging.getLogger(__name__)


@dataclass
class ForwardContext:
    """Per-iteration settings threaded through a forward pass."""
    bits: Mapping[int, int] = field(default_factory=dict)
    training: bool = False
    grad_spec: Optional[GradQuantSpec] = None
    rng: Optional[np.random.Generator] = None
    learn_precision: bool = False


def he_normal(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    return (rng.standard_normal(shape) * sqrt(2.0 / fan_in)).astype(dtype)


class QuantLayer:
    """Plumbing shared by the quantized GEMM layers."""

    def __init__(self, layer_id, name, weight: Parameter):
        self.layer_id = layer_id
        self.name = name
        self.weight = weight
        self.precision: Optional[PrecisionParam] = None
        self.input_shape = None

    @property
    def quantized(self):
        return self.precision is not None

    def bits(self, ctx: ForwardContext):
        if not self.quantized:
            return FULL_PRECISION_BITS
        return int(ctx.bits.get(self.layer_id, FULL_PRECISION_BITS))

    def quantize_operands(self, x, ctx: ForwardContext):
        bits = self.bits(ctx)
        if bits >= FULL_PRECISION_BITS:
            return x, self.weight.value, bits
        x_hat, _ = fake_quantize(x, self.precision, bits, track_beta=ctx.learn_precision)
        w_hat, _ = fake_quantize(self.weight.value, self.precision, bits, track_beta=ctx.learn_precision)
        return x_hat, w_hat, bits

    def quantize_output_gradient(self, y, bits, ctx: ForwardContext):
        if bits >= FULL_PRECISION_BITS or not ctx.training or ctx.grad_spec is None or ctx.rng is None:
            return y
        return quantize_backward_gradients(y, ctx.grad_spec, ctx.rng)

    def parameters(self):
        return [self.weight]

    def cost(self):
        return layer_full_bitops(self.describe())


class QuantLinear(QuantLayer):
    def __init__(self, layer_id, name, in_features, out_features, rng, dtype=DEFAULT_DTYPE):
        weight = Parameter.create(he_normal(rng, (in_features, out_features), in_features, dtype),
                                  f"{name}.weight", dtype)
        super().__init__(layer_id, name, weight)
        self.bias = Parameter.create(np.zeros(out_features), f"{name}.bias", dtype)
        self.in_features = in_features
        self.out_features = out_features
        self.input_shape = (in_features,)

    def describe(self):
        return LayerDescription(self.layer_id, 'matmul', (1, self.in_features, self.out_features), self.name)

    def output_shape(self, input_shape):
        return (self.out_features,)

    def forward(self, x, ctx: ForwardContext):
        if x.data.ndim > 2:
            x = flatten(x)
        x_hat, w_hat, bits = self.quantize_operands(x, ctx)
        y = self.quantize_output_gradient(matmul(x_hat, w_hat), bits, ctx)
        return add_bias(y, self.bias.value)

    def parameters(self):
        return [self.weight, self.bias]


class QuantConv2d(QuantLayer):
    def __init__(self, layer_id, name, in_channels, out_channels, kernel, stride, pad, rng, dtype=DEFAULT_DTYPE):
        fan_in = in_channels * kernel * kernel
        shape = (out_channels, in_channels, kernel, kernel)
        weight = Parameter.create(he_normal(rng, shape, fan_in, dtype), f"{name}.weight", dtype)
        super().__init__(layer_id, name, weight)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def output_shape(self, input_shape):
        channels, height, width = input_shape
        if channels != self.in_channels:
            raise ShapeError(f"{self.name} expects {self.in_channels} channels, got {channels}")
        return (self.out_channels,
                conv_output_size(height, self.kernel, self.stride, self.pad),
                conv_output_size(width, self.kernel, self.stride, self.pad))

    def bind(self, input_shape):
        self.input_shape = tuple(input_shape)
        return self.output_shape(input_shape)

    def describe(self):
        channels, height, width = self.input_shape
        return LayerDescription(
            self.layer_id, 'conv',
            (1, channels, height, width, self.out_channels, self.kernel, self.kernel, self.stride, self.pad),
            self.name,
        )

    def forward(self, x, ctx: ForwardContext):
        x_hat, w_hat, bits = self.quantize_operands(x, ctx)
        return self.quantize_output_gradient(conv2d(x_hat, w_hat, self.stride, self.pad), bits, ctx)


class BatchNorm:
    def __init__(self, name, channels, dtype=DEFAULT_DTYPE):
        self.name = name
        self.gamma = Parameter.create(np.ones(channels), f"{name}.gamma", dtype)
        self.beta = Parameter.create(np.zeros(channels), f"{name}.beta", dtype)
        self.state = BatchNormState.create(channels, dtype)

    def forward(self, x, ctx: ForwardContext):
        return batch_norm(x, self.gamma.value, self.beta.value, self.state, ctx.training)

    def parameters(self):
        return [self.gamma, self.beta]


class Network:
    """A built model: weight layers in forward order plus normalization layers."""

    kind = 'network'

    def __init__(self, input_shape, num_classes):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.layers = []
        self.norms = []

    def forward(self, x, ctx: ForwardContext):
        raise NotImplementedError

    def parameters(self):
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + [p for norm in self.norms for p in norm.parameters()]

    @property
    def quantized_layers(self):
        return [layer for layer in self.layers if layer.quantized]

    @property
    def precision_params(self):
        return {layer.layer_id: layer.precision for layer in self.quantized_layers}

    @property
    def layer_costs(self):
        """LayerCost per quantized layer, per input sample."""
        return [layer.cost() for layer in self.quantized_layers]

    @property
    def all_layer_costs(self):
        return [layer.cost() for layer in self.layers]

    @property
    def layer_names(self):
        return {layer.layer_id: layer.name for layer in self.layers}

    def block_of(self, num_blocks=3):
        """Map every quantized layer to a block index in [0, num_blocks)."""
        quantized = self.quantized_layers
        return {layer.layer_id: i * num_blocks // len(quantized) for i, layer in enumerate(quantized)}

    def attach_precision(self, quantize_first_last, n, b_min, b_max, beta_init, lr_beta):
        exempt = set()
        if not quantize_first_last:
            exempt = {self.layers[0].layer_id, self.layers[-1].layer_id}
            if len(exempt) >= len(self.layers):
                logger.warning(f"{self.kind} has no interior weight layers to quantize; quantizing all "
                               f"{len(self.layers)} layers")
                exempt = set()
        for layer in self.layers:
            if layer.layer_id in exempt:
                continue
            layer.precision = PrecisionParam(layer.layer_id, n=n, b_min=b_min, b_max=b_max, beta=beta_init,
                                             lr_beta=lr_beta, name=layer.name)
        logger.debug(f"Quantized layers: {[layer.name for layer in self.quantized_layers]}")

    def state_arrays(self):
        """Every tensor a checkpoint needs, by name, in a stable order."""
        arrays = {p.name: p.value.data for p in self.parameters()}
        for norm in self.norms:
            arrays[f"{norm.name}.running_mean"] = norm.state.running_mean
            arrays[f"{norm.name}.running_var"] = norm.state.running_var
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint tensors do not match the model: missing {missing}, unexpected {extra}")
        for name, current in expected.items():
            if arrays[name].shape != current.shape:
                raise CheckpointError(f"tensor '{name}' has shape {arrays[name].shape}, model expects {current.shape}")
        params = {p.name: p for p in self.parameters()}
        for name, value in arrays.items():
            if name in params:
                params[name].value.data = np.array(value, dtype=params[name].value.dtype)
        for norm in self.norms:
            norm.state.running_mean = np.array(arrays[f"{norm.name}.running_mean"], dtype=norm.state.running_mean.dtype)
            norm.state.running_var = np.array(arrays[f"{norm.name}.running_var"], dtype=norm.state.running_var.dtype)


class MLP(Network):
    kind = 'mlp'

    def __init__(self, widths, input_shape, rng, dtype=DEFAULT_DTYPE):
        super().__init__(input_shape, widths[-1])
        if prod(self.input_shape) != widths[0]:
            raise ShapeError(f"first width {widths[0]} does not match input shape {self.input_shape}")
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(QuantLinear(i, f"fc{i}", fan_in, fan_out, rng, dtype))

    def forward(self, x, ctx: ForwardContext):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, ctx)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class BasicBlock:
    """
    conv-bn-relu-conv-bn plus shortcut, then relu. Downsampling blocks use a
    4x4/stride-2/pad-1 first conv and a 2x2/stride-2 projection so that even
    spatial sizes halve exactly.
    """

    def __init__(self, net, name, in_channels, out_channels, stride, input_shape, rng, dtype):
        kernel, pad = (4, 1) if stride == 2 else (3, 1)
        self.stage = None
        self.conv1 = net.add_conv(f"{name}.conv1", in_channels, out_channels, kernel, stride, pad, input_shape, rng,
                                  dtype)
        self.bn1 = net.add_norm(f"{name}.bn1", out_channels, dtype)
        self.conv2 = net.add_conv(f"{name}.conv2", out_channels, out_channels, 3, 1, 1, self.conv1.output_shape(
            input_shape), rng, dtype)
        self.bn2 = net.add_norm(f"{name}.bn2", out_channels, dtype)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            size = 2 if stride == 2 else 1
            self.shortcut = net.add_conv(f"{name}.shortcut", in_channels, out_channels, size, stride, 0, input_shape,
                                         rng, dtype)
            self.shortcut_bn = net.add_norm(f"{name}.shortcut_bn", out_channels, dtype)
        self.output_shape = self.conv2.output_shape(self.conv1.output_shape(input_shape))

    @property
    def convs(self):
        return [self.conv1, self.conv2] + ([self.shortcut] if self.shortcut else [])

    def forward(self, x, ctx):
        out = relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        out = self.bn2.forward(self.conv2.forward(out, ctx), ctx)
        identity = x
        if self.shortcut is not None:
            identity = self.shortcut_bn.forward(self.shortcut.forward(x, ctx), ctx)
        return relu(add(out, identity))


class TinyResNet(Network):
    """stem conv, three residual stages (channels x1, x2, x4; stride 2 into stages 2 and 3), pool, linear."""

    kind = 'tiny_resnet'

    def __init__(self, stem_channels, blocks, classes, input_shape, rng, dtype=DEFAULT_DTYPE):
        super().__init__(input_shape, classes)
        if len(self.input_shape) != 3:
            raise ShapeError(f"tiny_resnet expects C x H x W inputs, got shape {self.input_shape}")
        if len(blocks) != 3:
            raise ShapeError(f"tiny_resnet needs blocks for exactly 3 stages, got {list(blocks)}")
        self._stage_of = {}

        self.stem = self.add_conv('stem', self.input_shape[0], stem_channels, 3, 1, 1, self.input_shape, rng, dtype)
        self.stem_bn = self.add_norm('stem_bn', stem_channels, dtype)
        self._stage_of[self.stem.layer_id] = 0
        shape = self.stem.output_shape(self.input_shape)

        self.blocks = []
        channels = stem_channels
        for stage, count in enumerate(blocks):
            out_channels = stem_channels * 2 ** stage
            for j in range(count):
                stride = 2 if stage > 0 and j == 0 else 1
                block = BasicBlock(self, f"stage{stage + 1}.block{j}", channels, out_channels, stride, shape, rng,
                                   dtype)
                block.stage = stage
                for conv in block.convs:
                    self._stage_of[conv.layer_id] = stage
                self.blocks.append(block)
                shape, channels = block.output_shape, out_channels

        self.classifier = QuantLinear(len(self.layers), 'classifier', channels, classes, rng, dtype)
        self.layers.append(self.classifier)
        self._stage_of[self.classifier.layer_id] = len(blocks) - 1

    def add_conv(self, name, in_channels, out_channels, kernel, stride, pad, input_shape, rng, dtype):
        conv = QuantConv2d(len(self.layers), name, in_channels, out_channels, kernel, stride, pad, rng, dtype)
        conv.bind(input_shape)
        self.layers.append(conv)
        return conv

    def add_norm(self, name, channels, dtype):
        norm = BatchNorm(name, channels, dtype)
        self.norms.append(norm)
        return norm

    def block_of(self, num_blocks=3):
        """Map each quantized layer to its stage; the stem joins stage 1, the classifier the last stage."""
        return {layer.layer_id: min(self._stage_of[layer.layer_id], num_blocks - 1)
                for layer in self.quantized_layers}

    def forward(self, x, ctx: ForwardContext):
        x = relu(self.stem_bn.forward(self.stem.forward(x, ctx), ctx))
        for block in self.blocks:
            x = block.forward(x, ctx)
        return self.classifier.forward(global_avg_pool(x), ctx)


def build_model(spec, input_shape, num_classes, rng, dtype=DEFAULT_DTYPE, beta_init=1.0, lr_beta=0.1):
    """
    Build the network described by `spec` (a ModelSpec) for inputs of
    `input_shape` (one sample) and attach a PrecisionParam to every quantized
    layer. Weights are He-initialized from `rng`.
    """
    if spec.kind == 'mlp':
        if spec.widths[-1] != num_classes:
            raise ShapeError(f"last width {spec.widths[-1]} does not match {num_classes} classes")
        net = MLP(spec.widths, input_shape, rng, dtype)
    elif spec.kind == 'tiny_resnet':
        if spec.classes != num_classes:
            raise ShapeError(f"model has {spec.classes} classes, dataset has {num_classes}")
        net = TinyResNet(spec.stem_channels, spec.blocks, spec.classes, input_shape, rng, dtype)
    else:
        raise ShapeError(f"unknown model kind '{spec.kind}'")
    net.attach_precision(spec.quantize_first_last, spec.n, spec.b_min, spec.b_max, beta_init, lr_beta)
    logger.info(f"Built {net.kind} with {len(net.layers)} weight layers, {len(net.quantized_layers)} quantized, "
                f"{sum(p.value.size for p in net.parameters())} parameters")
    return net
