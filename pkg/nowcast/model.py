"""
U-Net with valid (unpadded) convolutions for radar nowcasting.

The network is assembled from small functional operators (conv3x3_valid,
bn_relu, max_pool2, up_conv2, center_crop_concat, softmax_channels) so
each one can be tested on its own; gradients come from torch.autograd.
Tensors are (N, C, H, W); the operators also accept a single (C, H, W)
field.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from nowcast.errors import InfeasiblePlan, NonScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

NOWCAST_IN_CHANNELS = 13
ESTIMATION_IN_CHANNELS = 7
NOWCAST_OUT_CHANNELS = 3
ESTIMATION_OUT_CHANNELS = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 7
    base_channels: int = 32
    in_channels: int = NOWCAST_IN_CHANNELS
    out_channels: int = NOWCAST_OUT_CHANNELS
    input_hw: int = 1468


@dataclass(frozen=True)
class IOContract:
    input_hw: int
    output_hw: int
    offset: int

    def consistent(self):
        return 2 * self.offset + self.output_hw == self.input_hw


# Published input/output pair of the full-size network. The seven-stage
# chain behind it is not reproducible with two valid convs per stage, so it
# is kept as a contract rather than derived (see dim_plan).
FULL_SIZE_CONTRACT = IOContract(input_hw=1468, output_hw=706, offset=381)


@dataclass(frozen=True)
class StagePlan:
    name: str
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class DimPlan:
    stages: tuple
    crops: tuple
    output_hw: int
    offset: int
    skip_sizes: tuple = field(default=())

    @property
    def contract(self):
        return IOContract(self.output_hw + 2 * self.offset, self.output_hw, self.offset)


# -------------------------------------------------------------------
# OPERATORS
# -------------------------------------------------------------------
def _batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


def conv3x3_valid(x, weight):
    """Valid 3x3 convolution, stride 1, no bias: (c_in, h, w) -> (c_out, h-2, w-2)."""
    x, single = _batched(x)
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ShapeMismatch("conv", f"3x3 valid convolution needs at least 3x3 input, got {tuple(x.shape[-2:])}")
    y = F.conv2d(x, weight)
    return y[0] if single else y


def bn_relu(x, bn, training):
    """
    Batch normalization then ReLU.

    Train mode normalizes with batch statistics (over batch and space) and
    updates bn's running stats; eval mode uses the running stats.
    """
    x, single = _batched(x)
    y = F.batch_norm(
        x,
        bn.running_mean,
        bn.running_var,
        bn.weight,
        bn.bias,
        training=training,
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )
    y = F.relu(y)
    return y[0] if single else y


def max_pool2(x):
    x, single = _batched(x)
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeMismatch("pool", f"2x2 max pooling needs even height and width, got {tuple(x.shape[-2:])}")
    y = F.max_pool2d(x, kernel_size=2, stride=2)
    return y[0] if single else y


def up_conv2(x, weight):
    """Stride-2 2x2 transposed convolution: (c, h, w) -> (c/2, 2h, 2w)."""
    x, single = _batched(x)
    if x.shape[1] % 2:
        raise ShapeMismatch("upconv", f"up-convolution needs an even channel count, got {x.shape[1]}")
    y = F.conv_transpose2d(x, weight, stride=2)
    return y[0] if single else y


def center_crop_concat(skip, up):
    """Crop skip to up's size around its center and concatenate (skip first)."""
    skip, single = _batched(skip)
    up, _ = _batched(up)
    if skip.shape[1] != up.shape[1]:
        raise ShapeMismatch("concat", f"channel counts differ: skip {skip.shape[1]}, up {up.shape[1]}")
    dh = skip.shape[-2] - up.shape[-2]
    dw = skip.shape[-1] - up.shape[-1]
    if dh < 0 or dw < 0:
        raise ShapeMismatch("concat", f"skip {tuple(skip.shape[-2:])} is smaller than up {tuple(up.shape[-2:])}")
    if dh % 2 or dw % 2:
        raise ShapeMismatch("concat", f"crop margins must be even, got {dh}x{dw}")
    top, left = dh // 2, dw // 2
    cropped = skip[..., top:top + up.shape[-2], left:left + up.shape[-1]]
    y = torch.cat([cropped, up], dim=1)
    return y[0] if single else y


def softmax_channels(logits):
    # torch.softmax subtracts the per-pixel max before exponentiating
    return torch.softmax(logits, dim=-3)


# -------------------------------------------------------------------
# DIMENSION PLANNER
# -------------------------------------------------------------------
def dim_plan(config):
    """
    Simulate the network's shapes for a config.

    Raises InfeasiblePlan naming the first stage (0 = input block, k = k-th
    pooling stage, depth + k = k-th expansive stage) whose size is odd at a
    pooling or non-positive after a convolution.
    """
    size = config.input_hw
    channels = config.base_channels
    stages = [StagePlan("input", config.in_channels, size, size)]

    def convs(stage, name, size, channels):
        size -= 4
        if size <= 0:
            raise InfeasiblePlan(stage, f"{name} convolutions leave a non-positive size ({size})")
        stages.append(StagePlan(name, channels, size, size))
        return size

    size = convs(0, "enc0", size, channels)
    skips = []
    for k in range(1, config.depth + 1):
        if size % 2:
            raise InfeasiblePlan(k, f"cannot pool an odd size ({size})")
        skips.append((size, channels))
        size //= 2
        channels *= 2
        name = "bottleneck" if k == config.depth else f"enc{k}"
        size = convs(k, name, size, channels)

    crops = []
    for k in range(1, config.depth + 1):
        stage = config.depth + k
        size *= 2
        channels //= 2
        skip_size, _ = skips[-k]
        margin = skip_size - size
        if margin < 0 or margin % 2:
            raise InfeasiblePlan(stage, f"skip of size {skip_size} cannot be center-cropped to {size}")
        crops.append(margin // 2)
        size = convs(stage, f"dec{k}", size, channels)

    size -= 2
    if size <= 0:
        raise InfeasiblePlan(2 * config.depth + 1, f"final convolution leaves a non-positive size ({size})")
    stages.append(StagePlan("head", config.out_channels, size, size))

    margin = config.input_hw - size
    return DimPlan(
        stages=tuple(stages),
        crops=tuple(crops),
        output_hw=size,
        offset=margin // 2,
        skip_sizes=tuple(s for s, _ in skips),
    )


def reference_contract(config):
    """The published I/O contract for the full-size config, otherwise the planned one."""
    if config.depth == 7 and config.input_hw == FULL_SIZE_CONTRACT.input_hw:
        return FULL_SIZE_CONTRACT
    return dim_plan(config).contract


# -------------------------------------------------------------------
# NETWORK
# -------------------------------------------------------------------
class ConvBNReLU(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bn = nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        return bn_relu(conv3x3_valid(x, self.weight), self.bn, self.training)


class DoubleConv(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.first = ConvBNReLU(in_channels, out_channels)
        self.second = ConvBNReLU(out_channels, out_channels)

    def forward(self, x):
        return self.second(self.first(x))


class UpStage(nn.Module):
    def __init__(self, in_channels):
        super().__init__()
        self.up_weight = nn.Parameter(torch.empty(in_channels, in_channels // 2, 2, 2))
        self.convs = DoubleConv(in_channels, in_channels // 2)

    def forward(self, x, skip):
        return self.convs(center_crop_concat(skip, up_conv2(x, self.up_weight)))


class UNet(nn.Module):
    """
    Contracting path of config.depth pooling stages (two conv+BN+ReLU each,
    channels doubling), mirrored expansive path with center-cropped skip
    connections, and a final 3x3 conv producing out_channels logits.
    """

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        self.plan = dim_plan(config)

        channels = config.base_channels
        self.encoders = nn.ModuleList([DoubleConv(config.in_channels, channels)])
        for _ in range(config.depth):
            self.encoders.append(DoubleConv(channels, channels * 2))
            channels *= 2
        self.decoders = nn.ModuleList()
        for _ in range(config.depth):
            self.decoders.append(UpStage(channels))
            channels //= 2
        self.head = nn.Parameter(torch.empty(config.out_channels, channels, 3, 3))

        init_params(self, seed)

    def forward(self, x):
        x, single = _batched(x)
        expected = (self.config.in_channels, self.config.input_hw, self.config.input_hw)
        if tuple(x.shape[1:]) != expected:
            raise ShapeMismatch(0, f"input is {tuple(x.shape[1:])}, model expects {expected}")

        skips = []
        for k, encoder in enumerate(self.encoders):
            if k > 0:
                skips.append(x)
                x = max_pool2(x)
            x = encoder(x)
        for k, decoder in enumerate(self.decoders, start=1):
            x = decoder(x, skips[-k])
        logits = conv3x3_valid(x, self.head)

        if logits.shape[-1] != self.plan.output_hw:
            raise ShapeMismatch(2 * self.config.depth + 1, f"output is {logits.shape[-1]}, plan says {self.plan.output_hw}")
        return logits[0] if single else logits


def unet_forward(config, params, x, training=False):
    """Run a UNet built from config with the given state dict."""
    model = UNet(config).to(dtype=next(iter(params.values())).dtype)
    model.load_state_dict(params)
    model.train(training)
    return model(x)


# -------------------------------------------------------------------
# PARAMETERS
# -------------------------------------------------------------------
def _fan_in(name, tensor):
    if name.endswith("up_weight"):
        # each output tap of a stride-2 2x2 transposed conv sees one input pixel per channel
        return tensor.shape[0]
    return tensor.shape[1] * tensor.shape[2] * tensor.shape[3]


def init_params(model, seed, only=None):
    """Zero-mean uniform filters with scale 1/sqrt(fan_in); BN to identity."""
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if only is not None and name not in only:
                continue
            if param.dim() == 4:
                bound = 1.0 / math.sqrt(_fan_in(name, param))
                values = torch.rand(param.shape, generator=generator, dtype=torch.float64) * 2 - 1
                param.copy_(values * bound)
            elif name.endswith("bn.weight"):
                param.fill_(1.0)
            elif name.endswith("bn.bias"):
                param.zero_()
        if only is None:
            for name, buffer in model.named_buffers():
                if name.endswith("running_mean") or name.endswith("num_batches_tracked"):
                    buffer.zero_()
                elif name.endswith("running_var"):
                    buffer.fill_(1.0)


HEAD_PARAMETER = "head"


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def param_set(model):
    """Detached copy of every parameter and BN buffer, in a stable order."""
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())


def grad(loss, model):
    """Reverse-mode gradients of a scalar loss for every trainable parameter."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise NonScalarLoss(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return OrderedDict(
        (name, g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    )
