"""The four proposed systems, attentive statistics pooling, embeddings and
the checkpoint / embedding file formats."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import FrontBlock, msska_block, res2_block
from .errors import ConfigurationError, ContractError
from .features import Waveform, features
from .nn import BatchNorm, Conv1d, Conv2d, ConvBnRelu, Linear, Module
from .tensor import Tensor, no_grad

VARIANTS = ("ecapa_msska", "ecapa_cnn_fwska", "ecapa_cnn_fcwska", "ska_tdnn")
MIN_EMBED_SECONDS = 0.5
STD_EPS = 1e-8


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "ska_tdnn"
    n_mels: int = 80
    tdnn_channels: int = 1024
    scale_count: int = 8
    front_channels: tuple[int, ...] = (128, 128, 128)
    front_freq_strides: tuple[int, ...] = (1, 2, 2)
    tdnn_kernel: int = 5
    res2_dilations: tuple[int, ...] = (2, 3, 4)
    aggregate_channels: int = 1536
    pool_hidden: int = 128
    embedding_dim: int = 192
    reduction: int = 8
    min_attention_dim: int = 4
    toy_scale_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "front_channels", tuple(int(c) for c in self.front_channels))
        object.__setattr__(self, "front_freq_strides", tuple(int(s) for s in self.front_freq_strides))
        object.__setattr__(self, "res2_dilations", tuple(int(d) for d in self.res2_dilations))

    @classmethod
    def paper(cls, variant: str = "ska_tdnn") -> "NetworkConfig":
        return cls(variant=variant)

    @classmethod
    def toy(cls, variant: str = "ska_tdnn") -> "NetworkConfig":
        """64 TDNN channels, 4 scales, 8-channel front."""
        return cls(variant=variant, toy_scale_factor=16, scale_count=4)

    @property
    def has_front(self) -> bool:
        return self.variant != "ecapa_msska"

    @property
    def uses_msska(self) -> bool:
        return self.variant in ("ecapa_msska", "ska_tdnn")

    @property
    def channel_attention(self) -> bool:
        return self.variant in ("ecapa_cnn_fcwska", "ska_tdnn")

    def widths(self) -> dict:
        """Effective widths after toy scaling; raises on any invariant violation."""
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        f = self.toy_scale_factor
        if f < 1:
            raise ConfigurationError("toy_scale_factor must be >= 1")
        raw = {"tdnn": self.tdnn_channels, "aggregate": self.aggregate_channels,
               "pool_hidden": self.pool_hidden}
        for name, value in raw.items():
            if value < 1 or value % f:
                raise ConfigurationError(f"toy_scale_factor {f} does not divide {name} width {value}")
        if any(c % f for c in self.front_channels):
            raise ConfigurationError(f"toy_scale_factor {f} does not divide front widths")
        tdnn = self.tdnn_channels // f
        scale = self.scale_count
        if scale < 1:
            raise ConfigurationError("scale_count must be >= 1")
        if f > 1:
            while tdnn % scale:
                scale -= 1
        if tdnn % scale:
            raise ConfigurationError(f"scale_count {scale} does not divide {tdnn} channels")
        if self.has_front:
            if not self.front_channels or len(self.front_channels) != len(self.front_freq_strides):
                raise ConfigurationError("front_channels and front_freq_strides must align")
            if any(s < 1 for s in self.front_freq_strides):
                raise ConfigurationError("frequency strides must be >= 1")
        if len(self.res2_dilations) != 3:
            raise ConfigurationError("three TDNN stages are required")
        if self.n_mels < 1 or self.embedding_dim < 1 or self.tdnn_kernel % 2 == 0:
            raise ConfigurationError("n_mels/embedding_dim must be positive and tdnn_kernel odd")
        freq = self.n_mels
        for s in self.front_freq_strides if self.has_front else ():
            freq = -(-freq // s)
        return {"tdnn": tdnn, "scale": scale,
                "front": tuple(c // f for c in self.front_channels),
                "front_freq": freq,
                "aggregate": self.aggregate_channels // f,
                "pool_hidden": self.pool_hidden // f}

    def validate(self) -> "NetworkConfig":
        self.widths()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EmbeddingRecord:
    utterance_id: str
    embedding: np.ndarray
    duration_seconds: float


# -- pooling --------------------------------------------------------------------------------
class AttentiveStatsPool(Module):
    """Channel- and context-dependent attentive statistics pooling."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.attend = Conv1d(3 * channels, hidden, 1, rng, bias=True)
        self.attend_bn = BatchNorm(hidden)
        self.score = Conv1d(hidden, channels, 1, rng, bias=True)
        self.last_weights: np.ndarray | None = None

    def attention(self, x: Tensor) -> Tensor:
        frames = x.shape[2]
        ones = Tensor(np.ones((1, 1, frames)))
        mu = T.mean(x, axis=2, keepdims=True)
        sd = T.sqrt(T.clamp_min(T.mean(x * x, axis=2, keepdims=True) - mu * mu, STD_EPS))
        context = T.concat([x, mu * ones, sd * ones], axis=1)
        h = T.tanh(self.attend_bn(T.relu(self.attend(context))))
        return T.softmax(self.score(h), axis=2)

    def forward(self, x: Tensor) -> Tensor:
        return pool_asp(x, self)


def weighted_stats(x: Tensor, w: Tensor) -> Tensor:
    """concat(sum_t w x, sqrt(sum_t w x^2 - mean^2)) over the time axis."""
    mu = T.tsum(x * w, axis=2)
    var = T.tsum(x * x * w, axis=2) - mu * mu
    return T.concat([mu, T.sqrt(T.clamp_min(var, STD_EPS))], axis=1)


def pool_asp(frame_features: Tensor, pool: AttentiveStatsPool) -> Tensor:
    if frame_features.shape[2] < 2:
        raise ContractError("pooling needs at least 2 frames")
    w = pool.attention(frame_features)
    pool.last_weights = w.data
    return weighted_stats(frame_features, w)


# -- network ----------------------------------------------------------------------------------
class Network(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        widths = config.widths()
        self.config = config
        c = widths["tdnn"]
        kw = {"reduction": config.reduction, "min_dim": config.min_attention_dim}
        self.front_stem = None
        self.front = []
        tdnn_in = config.n_mels
        if config.has_front:
            fc = widths["front"]
            self.front_stem = ConvBnRelu(Conv2d(1, fc[0], 3, rng), fc[0])
            freq, cin = config.n_mels, fc[0]
            for cout, stride in zip(fc, config.front_freq_strides):
                block = FrontBlock(cin, cout, freq, rng, freq_stride=stride,
                                   channel_attention=config.channel_attention, **kw)
                self.front.append(block)
                freq, cin = block.freq_out, cout
            tdnn_in = cin * freq
        self.stem = ConvBnRelu(Conv1d(tdnn_in, c, config.tdnn_kernel, rng), c)
        if config.uses_msska:
            self.stages = [msska_block(c, widths["scale"], rng, **kw) for _ in range(3)]
        else:
            self.stages = [res2_block(c, widths["scale"], rng, d) for d in config.res2_dilations]
        a = widths["aggregate"]
        self.aggregate = Conv1d(3 * c, a, 1, rng, bias=True)
        self.pool = AttentiveStatsPool(a, widths["pool_hidden"], rng)
        self.pool_bn = BatchNorm(2 * a)
        self.embedding = Linear(2 * a, config.embedding_dim, rng)
        self.embedding_bn = BatchNorm(config.embedding_dim)

    @property
    def trace_block(self) -> FrontBlock:
        if not self.front:
            raise ConfigurationError(f"variant {self.config.variant} has no 2-D front network")
        return self.front[-1]

    def frame_features(self, mel: Tensor) -> Tensor:
        """(B, n_mels, T) -> concatenated TDNN stage outputs (B, 3C, T)."""
        if mel.ndim != 3 or mel.shape[1] != self.config.n_mels:
            raise ContractError(f"expected (B, {self.config.n_mels}, T) input, got {mel.shape}")
        batch, _, frames = mel.shape
        if frames < 2:
            raise ContractError("input too short: fewer than 2 frames")
        h = mel
        if self.front_stem is not None:
            h = self.front_stem(T.reshape(mel, (batch, 1, self.config.n_mels, frames)))
            for block in self.front:
                h = block(h)
            h = T.reshape(h, (batch, h.shape[1] * h.shape[2], frames))
        h = self.stem(h)
        x1 = self.stages[0](h)
        x2 = self.stages[1](h + x1)
        x3 = self.stages[2](h + x1 + x2)
        return T.concat([x1, x2, x3], axis=1)

    def forward(self, mel: Tensor) -> Tensor:
        agg = T.relu(self.aggregate(self.frame_features(mel)))
        stats = pool_asp(agg, self.pool)
        return self.embedding_bn(self.embedding(self.pool_bn(stats)))


def build(config: NetworkConfig, seed: int) -> Network:
    return Network(config.validate(), np.random.default_rng(seed))


def forward(net: Network, mel) -> Tensor:
    """Frame-level features for one (80, T) map or a (B, 80, T) batch."""
    x = mel.bins if hasattr(mel, "bins") else np.asarray(mel)
    if x.ndim == 2:
        x = x[None]
    return net.frame_features(Tensor(x))


def embed_batch(net: Network, feats: np.ndarray) -> np.ndarray:
    """Inference-mode embeddings for a (B, 80, T) stack of equal-length inputs."""
    with no_grad(), net.evaluating():
        return net(Tensor(feats)).data


def embed_features(net: Network, feats: np.ndarray) -> np.ndarray:
    return embed_batch(net, feats[None])[0]


def embed(net: Network, wave: Waveform, utterance_id: str = "") -> EmbeddingRecord:
    if wave.seconds < MIN_EMBED_SECONDS:
        raise ContractError(f"utterance shorter than {MIN_EMBED_SECONDS} s")
    return EmbeddingRecord(utterance_id, embed_features(net, features(wave)), wave.seconds)


# -- checkpoint container -----------------------------------------------------------------
MAGIC = b"SKACKPT\0"
VERSION = 1


def save_checkpoint(path: str | Path, config: NetworkConfig, blobs: dict[str, np.ndarray]) -> None:
    """Header (magic, version, config digest, count) then named float64 blobs."""
    parts = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(config.digest()),
             struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        arr = np.array(value, dtype="<f8", order="C")   # keeps 0-d shapes
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[12:44].hex()
    (count,) = struct.unpack_from("<I", raw, 44)
    pos = 48
    blobs = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return digest, blobs


# -- embedding text file -----------------------------------------------------------------
def write_embeddings(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            values = "\t".join(repr(float(v)) for v in r.embedding)
            fh.write(f"{r.utterance_id}\t{r.duration_seconds!r}\t{values}\n")


def read_embeddings(path: str | Path) -> dict[str, EmbeddingRecord]:
    records = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            if len(fields) < 3:
                continue
            records[fields[0]] = EmbeddingRecord(fields[0], np.array([float(v) for v in fields[2:]]),
                                                 float(fields[1]))
    return records
