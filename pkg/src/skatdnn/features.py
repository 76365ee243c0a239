"""Waveform I/O, log-mel features and duration utilities."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ContractError
from .tensor import interpolate_linear

SAMPLE_RATE = 16000
WIN_LENGTH = 400   # 25 ms
HOP_LENGTH = 160   # 10 ms
N_FFT = 512
N_MELS = 80
F_MIN = 20.0
F_MAX = 7600.0
LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ContractError("waveform must be a non-empty 1-D sequence")
        if self.sample_rate != SAMPLE_RATE:
            raise ContractError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    bins: np.ndarray  # (80, T)
    frame_hop: float = HOP_LENGTH / SAMPLE_RATE

    @property
    def frames(self) -> int:
        return self.bins.shape[1]


# -- WAV files ------------------------------------------------------------------------
def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono 16 kHz WAV file, scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, nframes = (fh.getnchannels(), fh.getsampwidth(),
                                              fh.getframerate(), fh.getnframes())
            raw = fh.readframes(nframes)
    except wave.Error as exc:
        raise ContractError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1 or width != 2 or rate != SAMPLE_RATE:
        raise ContractError(f"{path}: need 16-bit mono {SAMPLE_RATE} Hz PCM, got "
                            f"{channels} ch / {8 * width} bit / {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0)


def write_wav(path: str | Path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


# -- log-mel ----------------------------------------------------------------------------
def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak value 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def frame_count(num_samples: int) -> int:
    return 1 + (num_samples - WIN_LENGTH) // HOP_LENGTH


def logmel(wave_: Waveform) -> MelSpectrogram:
    x = wave_.samples
    if x.size < WIN_LENGTH:
        raise ContractError(f"waveform shorter than one window ({x.size} < {WIN_LENGTH} samples)")
    n = frame_count(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n]
    spec = np.fft.rfft(frames * np.hamming(WIN_LENGTH), n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = mel_filterbank() @ power.T
    return MelSpectrogram(np.log(mel + LOG_FLOOR))


def instance_normalize(mel: MelSpectrogram, eps: float = 1e-8) -> MelSpectrogram:
    """Per-bin mean/variance normalisation over time."""
    bins = mel.bins
    if bins.shape[1] < 2:
        raise ContractError("instance normalisation needs at least 2 frames")
    mu = bins.mean(axis=1, keepdims=True)
    sd = bins.std(axis=1, keepdims=True)
    return MelSpectrogram((bins - mu) / np.maximum(sd, eps), mel.frame_hop)


# -- duration manipulation -----------------------------------------------------------------
def _tile_to(samples: np.ndarray, length: int) -> np.ndarray:
    if samples.size >= length:
        return samples
    reps = -(-length // samples.size)
    return np.tile(samples, reps)


def crop_middle(wave_: Waveform, target_seconds: float) -> Waveform:
    """Centre crop to ``target_seconds``; short inputs are tiled first."""
    if target_seconds <= 0:
        raise ContractError("target duration must be positive")
    length = int(round(target_seconds * SAMPLE_RATE))
    x = _tile_to(wave_.samples, length)
    start = (x.size - length) // 2
    return Waveform(x[start:start + length].copy())


def random_crop(wave_: Waveform, seconds: float, rng: np.random.Generator) -> Waveform:
    """Uniformly placed crop of ``seconds``; short inputs are tiled first."""
    length = int(round(seconds * SAMPLE_RATE))
    x = _tile_to(wave_.samples, length)
    start = int(rng.integers(0, x.size - length + 1))
    return Waveform(x[start:start + length].copy())


def upsample(wave_: Waveform, factor: float) -> Waveform:
    """Linear-interpolation upsampling; the sample rate label is kept."""
    if factor < 1:
        raise ContractError("upsampling factor must be >= 1")
    if factor == 1:
        return wave_
    length = int(round(factor * len(wave_)))
    return Waveform(interpolate_linear(wave_.samples, length, factor))


def add_noise(wave_: Waveform, snr_db: float, rng: np.random.Generator, kind: str = "white") -> Waveform:
    """Additive noise at a given SNR; ``babble`` sums low-passed noise bursts."""
    x = wave_.samples
    if kind == "white":
        noise = rng.standard_normal(x.size)
    elif kind == "babble":
        noise = np.zeros(x.size)
        for _ in range(4):
            burst = np.convolve(rng.standard_normal(x.size), np.ones(8) / 8, mode="same")
            envelope = np.repeat(rng.uniform(0.2, 1.0, x.size // 1600 + 1), 1600)[:x.size]
            noise += burst * envelope
    else:
        raise ContractError(f"unknown noise kind {kind!r}")
    p_signal = np.mean(x * x)
    p_noise = np.mean(noise * noise)
    if p_signal == 0 or p_noise == 0:
        return wave_
    scale = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(x + scale * noise)


def features(wave_: Waveform) -> np.ndarray:
    """Normalised (80, T) log-mel input for the network."""
    return instance_normalize(logmel(wave_)).bins
