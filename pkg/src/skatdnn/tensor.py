"""Dense float64 arrays with a reverse-mode gradient tape.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients.  ``Tensor.backward`` walks the graph in
reverse topological order.  Leaves (parameters) receive ``.grad``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, NumericError

_GRAD_ENABLED = True

# Upper bound on im2col buffer size (floats) for one convolution chunk.
_COL_LIMIT = 1 << 17


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return _result(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _result(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# -- reductions and shape ----------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Global mean over the given axes."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if not np.shares_memory(out, a.data) and out.size:
        raise ContractError("only basic slicing is differentiable")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


# -- linear algebra ----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; a 1-D right operand is treated as a column vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ContractError("matmul needs a matrix on the left")
    if b.ndim == 1:
        if a.ndim != 2:
            raise ContractError("matrix-vector product needs a 2-D matrix")
        return _result(a.data @ b.data, (a, b),
                       lambda g: (np.multiply.outer(g, b.data), a.data.T @ g), "matvec")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward, "linear")


# -- softmax family ----------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


# -- normalisation -----------------------------------------------------------------
def _channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis except axis 1."""
    return x.reshape(x.shape[0], x.shape[1], -1).sum(axis=2).sum(axis=0)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except axis 1 (channels).

    In training mode the running statistics are updated in place as
    ``new = momentum * batch + (1 - momentum) * running``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[1]
    if gamma.shape != (channels,) or running_mean.shape != (channels,):
        raise ConfigurationError(f"batch_norm: {channels} channels vs statistics {gamma.shape}")
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    count = x.size // channels
    xd = x.data

    if training:
        mu = _channel_sum(xd) / count
        centred = xd - mu.reshape(bshape)
        var = _channel_sum(centred * centred) / count
        del centred
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    out = xd * scale.reshape(bshape) + (beta.data - mu * scale).reshape(bshape)

    def backward(g):
        sg = _channel_sum(g)
        sgxhat = (_channel_sum(g * xd) - mu * sg) * inv
        if training:
            # dx = scale * (g - mean(g) - xhat * mean(g * xhat)), expanded per channel
            b = -scale * inv * sgxhat / count
            c = -scale * sg / count - b * mu
            dx = g * scale.reshape(bshape) + xd * b.reshape(bshape) + c.reshape(bshape)
        else:
            dx = g * scale.reshape(bshape)
        return dx, sgxhat, sg

    return _result(out, (x, gamma, beta), backward, "batch_norm")


# -- convolution -------------------------------------------------------------------
def _chunks(batch: int, rows: int, per_row: int):
    """Yield (b0, b1, r0, r1) blocks whose im2col buffer stays under the limit."""
    per_example = rows * per_row
    if per_example <= _COL_LIMIT:
        step = max(1, _COL_LIMIT // max(per_example, 1))
        for b0 in range(0, batch, step):
            yield b0, min(batch, b0 + step), 0, rows
    else:
        step = max(1, _COL_LIMIT // per_row)
        for b in range(batch):
            for r0 in range(0, rows, step):
                yield b, b + 1, r0, min(rows, r0 + step)


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride, dilation, padding: str):
    batch, cin, height, width = x.shape
    cout, wcin, kf, kt = w.shape
    if wcin != cin:
        raise ConfigurationError(f"conv: weight expects {wcin} input channels, got {cin}")
    sf, st = stride
    df, dt = dilation
    if padding == "same":
        if kf % 2 == 0 or kt % 2 == 0:
            raise ConfigurationError("same padding needs odd kernel extents")
        pf, pt = df * (kf - 1) // 2, dt * (kt - 1) // 2
    elif padding == "valid":
        pf = pt = 0
    else:
        raise ConfigurationError(f"unknown padding {padding!r}")
    span_f, span_t = df * (kf - 1) + 1, dt * (kt - 1) + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else x
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < span_f or wp < span_t:
        raise ContractError("conv: input smaller than the kernel span")
    fo = (hp - span_f) // sf + 1
    to = (wp - span_t) // st + 1
    win = sliding_window_view(xp, (span_f, span_t), axis=(2, 3))[:, :, ::sf, ::st, ::df, ::dt]
    k = cin * kf * kt
    wm = w.reshape(cout, k)
    out = np.empty((batch, cout, fo, to))
    blocks = list(_chunks(batch, fo, to * k))

    def cols(b0, b1, r0, r1):
        part = win[b0:b1, :, r0:r1]  # (nb, cin, nf, to, kf, kt)
        return part.transpose(1, 4, 5, 0, 2, 3).reshape(k, -1)

    for b0, b1, r0, r1 in blocks:
        res = wm @ cols(b0, b1, r0, r1)
        out[b0:b1, :, r0:r1] = res.reshape(cout, b1 - b0, r1 - r0, to).transpose(1, 0, 2, 3)

    def backward(g: np.ndarray, need_x: bool):
        gw = np.zeros((cout, k))
        for b0, b1, r0, r1 in blocks:
            gb = g[b0:b1, :, r0:r1].transpose(1, 0, 2, 3).reshape(cout, -1)
            gw += gb @ cols(b0, b1, r0, r1).T
        gx = None
        if need_x:
            # transposed convolution: zero-stuff the gradient, correlate with the
            # flipped kernel, then drop the padding ring
            if sf == 1 and st == 1:
                g_up = g
            else:
                g_up = np.zeros((batch, cout, (fo - 1) * sf + 1, (to - 1) * st + 1))
                g_up[:, :, ::sf, ::st] = g
            g_up = np.pad(g_up, ((0, 0), (0, 0), (span_f - 1, span_f - 1), (span_t - 1, span_t - 1)))
            w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full, _ = _conv2d_raw(g_up, w_flip, (1, 1), dilation, "valid")
            gxp = np.zeros(xp.shape)
            gxp[:, :, :full.shape[2], :full.shape[3]] = full
            gx = gxp[:, :, pf:pf + height, pt:pt + width]
        return gx, gw.reshape(w.shape)

    return out, backward


def conv2d(x, weight, bias=None, stride=(1, 1), dilation=(1, 1), padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation) of a (B, C', F', T') map."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d: expected rank-4 input/weight, got {x.shape}, {weight.shape}")
    stride = _pair(stride)
    dilation = _pair(dilation)
    out, raw_backward = _conv2d_raw(x.data, weight.data, stride, dilation, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError("conv2d: bias does not match output channels")
        out += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx, gw = raw_backward(g, x.requires_grad)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, backward, "conv2d")


def conv1d(x, weight, bias=None, dilation: int = 1, stride: int = 1, padding: str = "same") -> Tensor:
    """1-D convolution over time of a (B, C', T') map; weight is (C, C', k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ConfigurationError(f"conv1d: expected rank-3 input/weight, got {x.shape}, {weight.shape}")
    if dilation < 1:
        raise ConfigurationError("conv1d: dilation must be >= 1")
    out = conv2d(reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2])),
                 reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2])),
                 bias, stride=(1, stride), dilation=(1, dilation), padding=padding)
    return reshape(out, (out.shape[0], out.shape[1], out.shape[3]))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    return int(v[0]), int(v[1])


# -- temporal interpolation ----------------------------------------------------------
def interpolate_linear(values: np.ndarray, length: int, factor: float | None = None) -> np.ndarray:
    """Linearly resample a 1-D signal to ``length`` samples.

    Output sample ``i`` reads source position ``i / factor`` (clamped to the last
    sample); when ``factor`` is omitted it is ``length / len(values)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if factor is None:
        factor = length / len(values)
    positions = np.arange(length) / factor
    return np.interp(positions, np.arange(len(values)), values)


def interpolate_nearest(values: np.ndarray, length: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    idx = np.minimum((np.arange(length) * len(values)) // length, len(values) - 1)
    return values[idx]


# -- gradient check ------------------------------------------------------------------
def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    entries.  ``max_entries`` limits the number of probed coordinates per
    parameter (chosen with ``rng``).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ContractError("epsilon must lie in [1e-7, 1e-4]")
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued graph")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ContractError("grad_check needs contiguous parameters")
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                plus = fn().item()
                flat[i] = orig - epsilon
                minus = fn().item()
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * epsilon)
                err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
