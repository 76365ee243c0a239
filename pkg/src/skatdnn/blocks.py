"""Composite blocks: squeeze-excitation, the 2-D SKA front blocks and the
Res2net-style backbone blocks (plain and multi-scale SKA)."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import BatchNorm, Conv1d, Conv2d, ConvBnRelu, Linear, Module
from .ska import CHANNEL, FREQUENCY, SkaConfig, SkaLayer, attention_dim
from .tensor import Tensor


class SqueezeExcitation(Module):
    """Channel gate: GAP -> affine -> ReLU -> affine -> sigmoid -> scale."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8, floor: int = 4):
        hidden = attention_dim(channels, reduction, floor)
        self.reduce = Linear(channels, hidden, rng)
        self.expand = Linear(hidden, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        s = T.mean(x, axis=tuple(range(2, x.ndim)))
        return T.sigmoid(self.expand(T.relu(self.reduce(s))))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gate(x)
        return x * T.reshape(g, g.shape + (1,) * (x.ndim - 2))


def se_forward(x: Tensor, se: SqueezeExcitation) -> Tensor:
    return se(x)


class FrontBlock(Module):
    """2-D conv -> fwSKA -> [cwSKA] -> SE, plus a residual path, then ReLU.

    With ``channel_attention`` this is the fcwSKA block; without it, the fwSKA
    block.  The frequency stride is applied by the leading convolution and by
    the 1x1 projection on the residual path.
    """

    def __init__(self, cin: int, cout: int, freq_in: int, rng: np.random.Generator,
                 freq_stride: int = 1, channel_attention: bool = True,
                 kernel_sizes=(3, 5), reduction: int = 8, min_dim: int = 4):
        self.freq_out = math.ceil(freq_in / freq_stride)
        self.conv = ConvBnRelu(Conv2d(cin, cout, 3, rng, stride=(freq_stride, 1)), cout)
        self.fwska = SkaLayer(SkaConfig(cout, cout, kernel_sizes, FREQUENCY, self.freq_out,
                                        reduction=reduction, min_dim=min_dim), rng)
        self.cwska = (SkaLayer(SkaConfig(cout, cout, kernel_sizes, CHANNEL,
                                         reduction=reduction, min_dim=min_dim), rng)
                      if channel_attention else None)
        self.se = SqueezeExcitation(cout, rng, reduction, min_dim)
        if cin != cout or freq_stride > 1:
            self.proj = Conv2d(cin, cout, 1, rng, stride=(freq_stride, 1))
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = self.proj_bn = None
        self.freq_in = freq_in

    def residual(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj_bn(self.proj(x))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.freq_in:
            raise ConfigurationError(f"block expects {self.freq_in} bins, got {x.shape[2]}")
        y = self.fwska(self.conv(x))
        if self.cwska is not None:
            y = self.cwska(y)
        return T.relu(self.se(y) + self.residual(x))


def fcwska_block(x: Tensor, block: FrontBlock) -> Tensor:
    if block.cwska is None:
        raise ConfigurationError("block has no channel-wise SKA stage")
    return block(x)


def fwska_block(x: Tensor, block: FrontBlock) -> Tensor:
    if block.cwska is not None:
        raise ConfigurationError("block carries a channel-wise SKA stage")
    return block(x)


# -- multi-scale cores ----------------------------------------------------------------
class MultiScale(Module):
    """Channel split into ``scale`` subsets with hierarchical (Res2net) chaining.

    Subset 0 is passed through unchanged; each remaining subset ``j`` is
    processed from ``x_j`` plus the previous processed output.  With
    ``scale == 1`` the whole map goes through a single operator.
    """

    def __init__(self, channels: int, scale: int):
        if scale < 1 or channels % scale:
            raise ConfigurationError(f"{channels} channels cannot be split into {scale} scales")
        self.channels = channels
        self.scale = scale
        self.width = channels // scale
        self.ops: list[Module] = []

    @property
    def processed(self) -> int:
        return max(self.scale - 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"expected {self.channels} channels, got {x.shape[1]}")
        if self.scale == 1:
            return self.ops[0](x)
        w = self.width
        outputs = [x[:, 0:w]]
        previous = None
        for j, op in enumerate(self.ops, start=1):
            sub = x[:, j * w:(j + 1) * w]
            previous = op(sub if previous is None else sub + previous)
            outputs.append(previous)
        return T.concat(outputs, axis=1)


class MsSka(MultiScale):
    """Multi-scale SKA: every processed subset uses a 1-D channel-wise SKA layer."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator,
                 kernel_sizes=(3, 5), reduction: int = 8, min_dim: int = 4):
        super().__init__(channels, scale)
        cfg = SkaConfig(self.width, self.width, kernel_sizes, CHANNEL, rank=1,
                        reduction=reduction, min_dim=min_dim)
        self.ops = [SkaLayer(cfg, rng) for _ in range(self.processed)]


class Res2Net(MultiScale):
    """Plain Res2net core with one dilated 1-D convolution per processed subset."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator,
                 kernel: int = 3, dilation: int = 1):
        super().__init__(channels, scale)
        self.ops = [ConvBnRelu(Conv1d(self.width, self.width, kernel, rng, dilation=dilation),
                               self.width) for _ in range(self.processed)]


def msska_forward(x: Tensor, core: MsSka) -> Tensor:
    return core(x)


class BackboneBlock(Module):
    """1x1 conv -> multi-scale core -> 1x1 conv -> SE, residual add, ReLU."""

    def __init__(self, channels: int, core: MultiScale, rng: np.random.Generator):
        self.conv_in = ConvBnRelu(Conv1d(channels, channels, 1, rng), channels)
        self.core = core
        self.conv_out = ConvBnRelu(Conv1d(channels, channels, 1, rng), channels)
        self.se = SqueezeExcitation(channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.se(self.conv_out(self.core(self.conv_in(x))))
        return T.relu(y + x)


def msska_block(channels: int, scale: int, rng: np.random.Generator, **kwargs) -> BackboneBlock:
    return BackboneBlock(channels, MsSka(channels, scale, rng, **kwargs), rng)


def res2_block(channels: int, scale: int, rng: np.random.Generator, dilation: int) -> BackboneBlock:
    return BackboneBlock(channels, Res2Net(channels, scale, rng, dilation=dilation), rng)
