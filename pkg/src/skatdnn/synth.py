"""Deterministic synthetic speaker corpus.

Each speaker owns a glottal pitch, a vocal-tract scale, per-formant offsets
and a spectral tilt.  Utterances are chains of vowel-like syllables: a
harmonic source with pitch jitter shaped by three formant resonators.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError
from .features import SAMPLE_RATE, Waveform, write_wav
from .scoring import NONTARGET, TARGET, Trial, write_trials

# rough F1-F3 of five cardinal vowels (Hz)
VOWELS = np.array([[730, 1090, 2440], [530, 1840, 2480], [270, 2290, 3010],
                   [570, 840, 2410], [300, 870, 2240]], dtype=np.float64)
BANDWIDTHS = np.array([80.0, 110.0, 160.0])
F0_RANGE = (90.0, 250.0)
TRACT_RANGE = (0.82, 1.18)


@dataclass(frozen=True)
class SynthSpeakerSpec:
    speaker_id: str
    f0: float                    # Hz
    tract_scale: float           # multiplies every vowel formant
    formant_offsets: tuple[float, float, float]  # per-formant multipliers
    tilt: float                  # harmonic amplitude ~ h^-tilt
    jitter: float                # relative pitch perturbation
    vibrato_hz: float


def speaker_specs(num_speakers: int, seed: int, min_f0_gap: float = 3.0) -> list[SynthSpeakerSpec]:
    """Speakers on permuted pitch / tract grids so any two differ in pitch by a fixed gap."""
    if num_speakers < 2:
        raise ConfigurationError("need at least two speakers")
    gap = (F0_RANGE[1] - F0_RANGE[0]) / (num_speakers - 1)
    if gap < min_f0_gap:
        raise ConfigurationError(f"{num_speakers} speakers leave a pitch gap of {gap:.2f} Hz "
                                 f"< {min_f0_gap} Hz")
    rng = np.random.default_rng([seed, 7919])
    f0s = np.linspace(*F0_RANGE, num_speakers)[rng.permutation(num_speakers)]
    tracts = np.linspace(*TRACT_RANGE, num_speakers)[rng.permutation(num_speakers)]
    specs = []
    for i in range(num_speakers):
        specs.append(SynthSpeakerSpec(
            speaker_id=f"spk{i:03d}", f0=float(f0s[i]), tract_scale=float(tracts[i]),
            formant_offsets=tuple(float(v) for v in rng.uniform(0.9, 1.1, 3)),
            tilt=float(rng.uniform(0.8, 1.6)), jitter=float(rng.uniform(0.01, 0.03)),
            vibrato_hz=float(rng.uniform(3.0, 7.0))))
    return specs


def min_pitch_gap(specs: list[SynthSpeakerSpec]) -> float:
    return min(abs(a.f0 - b.f0) for a, b in itertools.combinations(specs, 2))


def _resonator(signal: np.ndarray, freq: float, bandwidth: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2 * np.pi * freq / SAMPLE_RATE
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], signal)


def synth_utterance(spec: SynthSpeakerSpec, seconds: float, rng: np.random.Generator) -> Waveform:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    # pitch track: speaker base, slow drift, vibrato and smoothed jitter
    drift = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * spec.vibrato_hz * t)
    jitter = np.repeat(rng.standard_normal(n // 80 + 1), 80)[:n]
    jitter = np.convolve(jitter, np.ones(200) / 200, mode="same") * spec.jitter * 8
    f0 = spec.f0 * drift * vibrato * (1.0 + jitter)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    harmonics = np.arange(1, int(7600 / (spec.f0 * 1.2)) + 1)
    amps = harmonics ** -spec.tilt
    source = np.zeros(n)
    step = np.exp(1j * phase)
    rotor = np.ones(n, dtype=np.complex128)
    for h, a in zip(harmonics, amps):
        rotor *= step   # exp(i h phase) by repeated rotation
        source += a * rotor.imag * (h * f0 < 7600)
    source += 0.02 * rng.standard_normal(n)   # aspiration

    out = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(int(rng.uniform(0.12, 0.30) * SAMPLE_RATE), n - pos)
        vowel = VOWELS[rng.integers(len(VOWELS))]
        formants = vowel * spec.tract_scale * np.array(spec.formant_offsets)
        formants *= 1.0 + 0.02 * rng.standard_normal(3)
        seg = source[pos:pos + length]
        for f, bw in zip(formants, BANDWIDTHS):
            seg = _resonator(seg, min(f, 7000.0), bw)
        out[pos:pos + length] = seg * np.hanning(length) * rng.uniform(0.5, 1.0)
        pos += length
    out /= np.sqrt(np.mean(out ** 2)) + 1e-12
    out = 0.1 * out + 0.003 * rng.standard_normal(n)
    return Waveform(np.clip(out, -0.99, 0.99))


@dataclass(frozen=True)
class SynthSettings:
    speakers: int = 20
    utterances: int = 10
    seconds: float = 3.0
    heldout: int = 4           # utterances per speaker reserved for trials
    target_trials: int = 100
    nontarget_trials: int = 100
    seed: int = 0

    def validate(self) -> "SynthSettings":
        if self.speakers < 2 or self.utterances < 2:
            raise ConfigurationError("need >= 2 speakers with >= 2 utterances")
        if not 2 <= self.heldout <= self.utterances - 2:
            raise ConfigurationError("heldout must leave >= 2 training utterances and be >= 2")
        if self.seconds < 0.5:
            raise ConfigurationError("utterances must be at least 0.5 s")
        pairs = self.speakers * self.heldout * (self.heldout - 1) // 2
        if self.target_trials > pairs:
            raise ConfigurationError(f"only {pairs} target pairs available")
        return self


MANIFEST = "manifest.tsv"
TRIALS = "trials.txt"


def synth_dataset(out_dir: str | Path, settings: SynthSettings = SynthSettings()) -> Path:
    """Write WAVs, ``manifest.tsv`` (speaker, utterance path, split) and ``trials.txt``."""
    settings.validate()
    out = Path(out_dir)
    specs = speaker_specs(settings.speakers, settings.seed)
    rows = []
    heldout: dict[str, list[str]] = {}
    for k, spec in enumerate(specs):
        (out / "wavs" / spec.speaker_id).mkdir(parents=True, exist_ok=True)
        for u in range(settings.utterances):
            rel = f"wavs/{spec.speaker_id}/utt{u:03d}.wav"
            rng = np.random.default_rng([settings.seed, k, u])
            write_wav(out / rel, synth_utterance(spec, settings.seconds, rng))
            split = "heldout" if u >= settings.utterances - settings.heldout else "train"
            rows.append(f"{spec.speaker_id}\t{rel}\t{split}")
            if split == "heldout":
                heldout.setdefault(spec.speaker_id, []).append(rel)
    (out / MANIFEST).write_text("\n".join(rows) + "\n")
    write_trials(out / TRIALS, make_trials(heldout, settings))
    with open(out / "speakers.tsv", "w") as fh:
        for s in specs:
            fh.write(f"{s.speaker_id}\t{s.f0:.3f}\t{s.tract_scale:.4f}\t"
                     + "\t".join(f"{v:.4f}" for v in s.formant_offsets)
                     + f"\t{s.tilt:.4f}\t{s.jitter:.4f}\t{s.vibrato_hz:.3f}\n")
    return out


def make_trials(heldout: dict[str, list[str]], settings: SynthSettings) -> list[Trial]:
    rng = np.random.default_rng([settings.seed, 104729])
    speakers = sorted(heldout)
    same = [(a, b) for s in speakers for a, b in itertools.combinations(heldout[s], 2)]
    picks = rng.choice(len(same), settings.target_trials, replace=False)
    trials = [Trial(TARGET, *same[i]) for i in sorted(picks)]
    chosen = set()
    while len(chosen) < settings.nontarget_trials:
        s1, s2 = rng.choice(len(speakers), 2, replace=False)
        a = heldout[speakers[s1]][rng.integers(settings.heldout)]
        b = heldout[speakers[s2]][rng.integers(settings.heldout)]
        chosen.add((a, b))
    trials += [Trial(NONTARGET, a, b) for a, b in sorted(chosen)]
    return trials


def read_manifest(dataset: str | Path) -> list[tuple[str, str, str]]:
    """(speaker, relative path, split) rows."""
    path = Path(dataset) / MANIFEST
    if not path.exists():
        raise ConfigurationError(f"{path}: dataset manifest missing (run synth first)")
    return [tuple(line.split("\t")) for line in path.read_text().splitlines() if line]
