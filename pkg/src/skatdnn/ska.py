"""Selective kernel attention over the channel or frequency axis.

A layer runs ``N`` parallel convolutions with distinct kernel sizes, fuses them
by summation, squeezes the fused map to a descriptor along the attended axis,
compresses it to ``d`` dimensions, and mixes the branches per index with a
softmax across branches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import BatchNorm, Conv1d, Conv2d, Module, kaiming
from .tensor import Tensor

CHANNEL = "channel"
FREQUENCY = "frequency"


def attention_dim(extent: int, reduction: int = 8, floor: int = 4) -> int:
    return max(extent // reduction, floor)


@dataclass(frozen=True)
class SkaConfig:
    in_channels: int
    channels: int
    kernel_sizes: tuple[int, ...] = (3, 5)
    axis: str = CHANNEL
    freq_bins: int | None = None   # F, required for the frequency axis
    rank: int = 2                  # 2: (B, C, F, T) maps, 1: (B, C, T) maps
    reduction: int = 8
    min_dim: int = 4
    branch_norm: bool = True

    def __post_init__(self):
        ks = tuple(self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if not ks:
            raise ConfigurationError("at least one branch is required")
        if len(set(ks)) != len(ks) or any(k % 2 == 0 or k < 1 for k in ks):
            raise ConfigurationError(f"kernel sizes must be distinct and odd, got {ks}")
        if self.axis not in (CHANNEL, FREQUENCY):
            raise ConfigurationError(f"unknown attention axis {self.axis!r}")
        if self.axis == FREQUENCY:
            if self.rank != 2:
                raise ConfigurationError("frequency attention needs rank-2 (F x T) maps")
            if not self.freq_bins or self.freq_bins < 1:
                raise ConfigurationError("frequency attention needs freq_bins")
        if self.rank not in (1, 2):
            raise ConfigurationError("rank must be 1 or 2")
        if self.in_channels < 1 or self.channels < 1:
            raise ConfigurationError("channel counts must be positive")

    @property
    def branch_count(self) -> int:
        return len(self.kernel_sizes)

    @property
    def attended(self) -> int:
        return self.channels if self.axis == CHANNEL else self.freq_bins

    @property
    def dim(self) -> int:
        return attention_dim(self.attended, self.reduction, self.min_dim)


@dataclass
class SkaAttentionTrace:
    fused: np.ndarray                 # U
    pooled: np.ndarray                # s, (B, |s|)
    compact: np.ndarray               # z, (B, d)
    weights: list[np.ndarray] = field(default_factory=list)  # a_{k_i}, each (B, |s|)


class Branch(Module):
    """One kernel-size branch: convolution, optionally followed by BN + ReLU."""

    def __init__(self, cfg: SkaConfig, kernel: int, rng: np.random.Generator):
        if cfg.rank == 2:
            self.conv = Conv2d(cfg.in_channels, cfg.channels, kernel, rng)
        else:
            self.conv = Conv1d(cfg.in_channels, cfg.channels, kernel, rng)
        self.bn = BatchNorm(cfg.channels) if cfg.branch_norm else None

    def forward(self, x: Tensor) -> Tensor:
        u = self.conv(x)
        return T.relu(self.bn(u)) if self.bn is not None else u


class SkaLayer(Module):
    def __init__(self, cfg: SkaConfig, rng: np.random.Generator):
        self.cfg = cfg
        n, d = cfg.attended, cfg.dim
        self.branches = [Branch(cfg, k, rng) for k in cfg.kernel_sizes]
        self.squeeze = kaiming(rng, (d, n), n)       # W
        self.squeeze_bn = BatchNorm(d)
        self.attention = [kaiming(rng, (n, d), d) for _ in cfg.kernel_sizes]  # A_{k_i}
        self.capture = False
        self.last_trace: SkaAttentionTrace | None = None

    def forward(self, x: Tensor) -> Tensor:
        v, trace = ska_forward(x, self)
        if self.capture:
            self.last_trace = trace
        return v


# -- the five stages ----------------------------------------------------------------------
def ska_branches(x: Tensor, branches) -> list[Tensor]:
    outs = [b(x) for b in branches]
    shapes = {u.shape for u in outs}
    if len(shapes) != 1:
        raise ConfigurationError(f"branch outputs disagree in shape: {sorted(shapes)}")
    return outs


def fuse(branches: list[Tensor]) -> Tensor:
    """Element-wise sum of the branch maps."""
    fused = branches[0]
    for u in branches[1:]:
        fused = fused + u
    return fused


def squeeze_channel(u: Tensor) -> Tensor:
    """Per-channel mean over every non-channel, non-batch axis: (B, C)."""
    return T.mean(u, axis=tuple(range(2, u.ndim)))


def squeeze_frequency(u: Tensor) -> Tensor:
    """Per-frequency mean over channels and time of a (B, C, F, T) map: (B, F)."""
    if u.ndim != 4:
        raise ContractError("frequency squeeze needs a (B, C, F, T) map")
    return T.mean(u, axis=(1, 3))


def compact(s: Tensor, weight: Tensor, bn: BatchNorm) -> Tensor:
    """z = ReLU(BN(W s)) for a batch of descriptors ``s`` (B, n)."""
    if weight.shape[1] != s.shape[-1]:
        raise ConfigurationError(f"squeeze weight {weight.shape} vs descriptor {s.shape}")
    return T.relu(bn(T.linear(s, weight)))


def select(z: Tensor, attention: list[Tensor]) -> list[Tensor]:
    """Per-index softmax across branches of the logits ``A_{k_i} z``."""
    batch = z.shape[0]
    logits = [T.linear(z, a) for a in attention]               # each (B, n)
    n = logits[0].shape[1]
    stacked = T.concat([T.reshape(l, (batch, 1, n)) for l in logits], axis=1)
    weights = T.softmax(stacked, axis=1)
    return [weights[:, i, :] for i in range(len(attention))]


def _broadcast_shape(batch: int, n: int, axis: str, ndim: int) -> tuple[int, ...]:
    if axis == CHANNEL:
        return (batch, n) + (1,) * (ndim - 2)
    return (batch, 1, n, 1)


def recalibrate(branches: list[Tensor], weights: list[Tensor], axis: str = CHANNEL) -> Tensor:
    """V_j = sum_i a_{k_i;j} U_{k_i;j}, broadcast over the non-attended axes."""
    batch, n = weights[0].shape
    shape = _broadcast_shape(batch, n, axis, branches[0].ndim)
    v = None
    for u, a in zip(branches, weights):
        term = u * T.reshape(a, shape)
        v = term if v is None else v + term
    return v


def ska_forward(x: Tensor, layer: SkaLayer) -> tuple[Tensor, SkaAttentionTrace]:
    cfg = layer.cfg
    branches = ska_branches(x, layer.branches)
    u = fuse(branches)
    if cfg.axis == CHANNEL:
        s = squeeze_channel(u)
    else:
        if u.shape[2] != cfg.freq_bins:
            raise ConfigurationError(f"layer built for {cfg.freq_bins} bins, map has {u.shape[2]}")
        s = squeeze_frequency(u)
    z = compact(s, layer.squeeze, layer.squeeze_bn)
    weights = select(z, layer.attention)
    v = recalibrate(branches, weights, cfg.axis)
    trace = SkaAttentionTrace(u.data, s.data, z.data, [a.data for a in weights])
    return v, trace
