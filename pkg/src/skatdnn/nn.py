"""Parameter containers and the basic layers built on ``tensor``."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


class Module:
    """Minimal module base: parameters, buffers and a train/eval flag.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules and
    lists of either are walked in attribute insertion order, which fixes the
    parameter naming used by checkpoints.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _members(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{key}.{i}", item
            elif isinstance(value, (Module, Tensor)):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._members():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in self._members():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextlib.contextmanager
    def evaluating(self):
        """Temporarily switch to eval mode, restoring each sub-module's flag."""
        saved = [(m, m.training) for m in self.modules()]
        self.eval()
        try:
            yield self
        finally:
            for m, flag in saved:
                m.training = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            value = state[f"param/{name}"]
            if value.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {value.shape} vs {p.shape}")
            p.data[...] = value
        for name, b in self.named_buffers():
            b[...] = state[f"buffer/{name}"]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator,
                 stride=(1, 1), dilation=(1, 1), bias: bool = False):
        kf, kt = (kernel, kernel) if isinstance(kernel, int) else kernel
        if kf % 2 == 0 or kt % 2 == 0:
            raise ConfigurationError(f"kernel extents must be odd, got {(kf, kt)}")
        self.weight = kaiming(rng, (cout, cin, kf, kt), cin * kf * kt)
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 dilation: int = 1, bias: bool = False):
        if kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel}")
        self.weight = kaiming(rng, (cout, cin, kernel), cin * kernel)
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, dilation=self.dilation)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = kaiming(rng, (fan_out, fan_in), fan_in)
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch norm over axis 1 for inputs of any rank >= 2."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ConvBnRelu(Module):
    """Convolution followed by batch norm and ReLU."""

    def __init__(self, conv: Module, channels: int):
        self.conv = conv
        self.bn = BatchNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
