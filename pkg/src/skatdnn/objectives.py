"""Training objectives (AAM-softmax + angular prototypical), Adam with
decoupled weight decay, and the warm-restart cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Module, parameter
from .tensor import Tensor


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = T.sqrt(T.tsum(x * x, axis=axis, keepdims=True))
    return x / norm


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ContractError(f"labels must be 1-D class indices in [0, {classes})")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy for one-hot ``targets``."""
    return -T.tsum(T.log_softmax(logits, axis=1) * targets) / logits.shape[0]


def aam_logits(embeddings: Tensor, labels: np.ndarray, weight: Tensor,
               margin: float = 0.2, scale: float = 30.0) -> Tensor:
    """s*cos(theta_y + m) on the target column, s*cos(theta_j) elsewhere.

    When theta_y + m would pass pi the target logit falls back to
    ``cos(theta_y) - m*sin(m)``, which keeps it monotone in theta_y.
    """
    onehot = _one_hot(labels, weight.shape[0])
    cos = T.linear(l2_normalize(embeddings), l2_normalize(weight))
    cos_t = T.tsum(cos * onehot, axis=1)
    sin_t = T.sqrt(T.clamp_min(1.0 - cos_t * cos_t, 1e-24))
    shifted = cos_t * math.cos(margin) - sin_t * math.sin(margin)
    fallback = cos_t - math.sin(math.pi - margin) * margin
    phi = T.where(cos_t.data > math.cos(math.pi - margin), shifted, fallback)
    delta = T.reshape(phi - cos_t, (-1, 1)) * onehot
    return (cos + delta) * scale


def aam_loss(embeddings: Tensor, labels: np.ndarray, weight: Tensor,
             margin: float = 0.2, scale: float = 30.0) -> Tensor:
    logits = aam_logits(embeddings, labels, weight, margin, scale)
    return cross_entropy(logits, _one_hot(labels, weight.shape[0]))


def ap_loss(pairs: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Angular prototypical loss on a (S, 2, E) batch.

    Utterance 0 of each speaker is the query, utterance 1 the prototype; the
    logits are ``w * cos(query_i, prototype_j) + b`` with ``w`` clamped at 1e-6.
    """
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ContractError(f"AP loss needs (speakers, 2, dim) embeddings, got {pairs.shape}")
    speakers = pairs.shape[0]
    if speakers < 2:
        raise ContractError("AP loss needs at least two speakers per batch")
    query = l2_normalize(pairs[:, 0, :])
    proto = l2_normalize(pairs[:, 1, :])
    cos = T.linear(query, proto)
    logits = cos * T.clamp_min(w, 1e-6) + b
    return cross_entropy(logits, np.eye(speakers))


class AamHead(Module):
    def __init__(self, classes: int, dim: int, rng: np.random.Generator,
                 margin: float = 0.2, scale: float = 30.0):
        bound = math.sqrt(6.0 / (classes + dim))
        self.weight = parameter(rng.uniform(-bound, bound, (classes, dim)))
        self.margin = margin
        self.scale = scale

    def forward(self, embeddings: Tensor, labels: np.ndarray) -> Tensor:
        return aam_loss(embeddings, labels, self.weight, self.margin, self.scale)


class ApHead(Module):
    def __init__(self, init_w: float = 10.0, init_b: float = -5.0):
        self.w = parameter(np.array([init_w]))
        self.b = parameter(np.array([init_b]))

    def forward(self, pairs: Tensor) -> Tensor:
        return ap_loss(pairs, self.w, self.b)


def combined_loss(embeddings: Tensor, labels: np.ndarray, aam: AamHead, ap: ApHead) -> Tensor:
    """Equal-weight AAM + AP; consecutive rows are same-speaker pairs."""
    n, dim = embeddings.shape
    if n % 2:
        raise ContractError("batch must hold two utterances per speaker")
    labels = np.asarray(labels)
    if np.any(labels[0::2] != labels[1::2]):
        raise ContractError("consecutive utterances must share a speaker label")
    return aam(embeddings, labels) + ap(T.reshape(embeddings, (n // 2, 2, dim)))


# -- optimisation -------------------------------------------------------------------------
class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 2e-5):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam/t": np.array(float(self.t))}
        for name, _ in self.params:
            state[f"adam/m/{name}"] = self.m[name]
            state[f"adam/v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam/t"])
        for name, _ in self.params:
            self.m[name][...] = state[f"adam/m/{name}"]
            self.v[name][...] = state[f"adam/v/{name}"]


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict | None,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 2e-5) -> tuple[dict[str, np.ndarray], dict]:
    """Functional form of one Adam step on plain arrays."""
    state = state or {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
                      "v": {k: np.zeros_like(v) for k, v in params.items()}}
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        update = (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
        new_params[k] = p - lr * (update + weight_decay * p)
        new_m[k], new_v[k] = m, v
    return new_params, {"t": t, "m": new_m, "v": new_v}


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with linear warm-up and decaying warm restarts."""

    max_lr: float = 1e-3
    cycle_epochs: int = 25
    cycle_decay: float = 0.8
    warmup_epochs: float = 1.0
    floor: float = 1e-8
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.cycle_epochs:
            raise ContractError("warm-up must be shorter than a cycle")
        if self.max_lr <= 0 or self.floor <= 0 or self.steps_per_epoch < 1:
            raise ContractError("learning rates must be positive")

    def peak(self, epoch: int) -> float:
        return self.max_lr * self.cycle_decay ** (epoch // self.cycle_epochs)

    def lr_at(self, epoch: int, step_in_epoch: int = 0) -> float:
        if epoch < 0:
            raise ContractError("epoch must be >= 0")
        peak = self.peak(epoch)
        pos = epoch % self.cycle_epochs + step_in_epoch / self.steps_per_epoch
        if pos < self.warmup_epochs:
            return self.floor + (peak - self.floor) * pos / self.warmup_epochs
        progress = (pos - self.warmup_epochs) / (self.cycle_epochs - self.warmup_epochs)
        return self.floor + (peak - self.floor) * (1.0 + math.cos(math.pi * progress)) / 2.0


def lr_at(schedule: LrSchedule, epoch: int, step_in_epoch: int = 0) -> float:
    return schedule.lr_at(epoch, step_in_epoch)
