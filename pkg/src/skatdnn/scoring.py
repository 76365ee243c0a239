"""Verification back-end: cosine, TTA and adaptive s-norm scoring, EER,
MinDCF and the short-duration test protocol."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .features import SAMPLE_RATE, Waveform, crop_middle

TARGET = "target"
NONTARGET = "nontarget"
BACKENDS = ("cos", "tta", "sn")
DURATIONS = ("full", "3.0", "1.5")

TTA_SEGMENTS = 10
TTA_SECONDS = 4.0


@dataclass(frozen=True)
class Trial:
    label: str
    enroll_id: str
    test_id: str

    def __post_init__(self):
        if self.label not in (TARGET, NONTARGET):
            raise ContractError(f"trial label must be target or nontarget, got {self.label!r}")

    @property
    def is_target(self) -> bool:
        return self.label == TARGET


@dataclass
class TrialScoreSet:
    trials: list[Trial]
    scores: np.ndarray
    backend: str = "cos"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.trials),):
            raise ContractError("need exactly one score per trial")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("trial scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.is_target for t in self.trials])


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_miss <= 0 or self.c_fa <= 0:
            raise ContractError("DCF needs 0 < p_target < 1 and positive costs")


# -- trial scoring -------------------------------------------------------------------------
def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine score of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise cosines between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ContractError("cosine score of a zero-norm embedding")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def tta_starts(num_samples: int, segment: int, count: int = TTA_SEGMENTS) -> np.ndarray:
    """Evenly spaced segment starts over [0, num_samples - segment]."""
    last = max(num_samples - segment, 0)
    return np.round(np.linspace(0, last, count)).astype(np.int64)


def tta_segments(wave_: Waveform, seconds: float = TTA_SECONDS,
                 count: int = TTA_SEGMENTS) -> list[Waveform]:
    length = int(round(seconds * SAMPLE_RATE))
    x = wave_.samples
    if x.size < length:
        x = crop_middle(wave_, seconds).samples
    return [Waveform(x[s:s + length].copy()) for s in tta_starts(x.size, length, count)]


Embedder = Callable[[list[Waveform]], np.ndarray]


def tta_score(enroll: Waveform, test: Waveform, embedder: Embedder) -> float:
    """Mean of the 10 x 10 pairwise cosines between segment embeddings.

    ``embedder`` maps a list of waveforms to an (N, E) array; a
    :class:`~skatdnn.network.Network` can be adapted with :func:`network_embedder`.
    """
    ea = np.asarray(embedder(tta_segments(enroll)))
    et = np.asarray(embedder(tta_segments(test)))
    return tta_from_embeddings(ea, et)


def tta_from_embeddings(enroll_segments: np.ndarray, test_segments: np.ndarray) -> float:
    return float(np.mean(cosine_matrix(enroll_segments, test_segments)))


def network_embedder(net) -> Embedder:
    from .features import features
    from .network import embed_batch

    def run(waves: list[Waveform]) -> np.ndarray:
        return embed_batch(net, np.stack([features(w) for w in waves]))
    return run


# -- adaptive s-norm ------------------------------------------------------------------------
def cohort_stats(cohort_scores: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of the ``top_k`` highest scores in each row."""
    cohort_scores = np.atleast_2d(np.asarray(cohort_scores, dtype=np.float64))
    size = cohort_scores.shape[1]
    if not 1 <= top_k <= size:
        raise ContractError(f"top_k={top_k} outside [1, cohort size {size}]")
    top = -np.sort(-cohort_scores, axis=1)[:, :top_k]
    mu = top.mean(axis=1)
    sd = top.std(axis=1)
    degenerate = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(degenerate):
        raise NumericError("degenerate cohort: zero score spread, s-norm undefined")
    return mu, sd


def snorm_from_cohort_scores(raw: np.ndarray, enroll_cohort: np.ndarray, test_cohort: np.ndarray,
                             top_k: int) -> np.ndarray:
    """Symmetric adaptive s-norm given per-trial cohort score rows."""
    raw = np.asarray(raw, dtype=np.float64)
    mu_e, sd_e = cohort_stats(enroll_cohort, top_k)
    mu_t, sd_t = cohort_stats(test_cohort, top_k)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def snorm(raw_scores, enroll_embs, test_embs, cohort_embs, top_k: int | None = None) -> np.ndarray:
    """Adaptive s-norm with cosine cohort scores; ``top_k`` defaults to min(50000, cohort)."""
    cohort = np.atleast_2d(np.asarray(cohort_embs, dtype=np.float64))
    top_k = min(50000, cohort.shape[0]) if top_k is None else top_k
    return snorm_from_cohort_scores(raw_scores, cosine_matrix(enroll_embs, cohort),
                                    cosine_matrix(test_embs, cohort), top_k)


# -- error rates ------------------------------------------------------------------------------
def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be matching 1-D arrays")
    if not np.all(np.isfinite(scores)):
        raise NumericError("scores must be finite")
    tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise ContractError("need at least one target and one nontarget trial")
    return np.sort(tar), np.sort(non)


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (midpoints of sorted unique scores plus +-inf) with FAR and FRR.

    FAR counts nontargets strictly above the threshold, FRR targets strictly below.
    """
    tar, non = _split(scores, labels)
    unique = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate([[-np.inf], (unique[:-1] + unique[1:]) / 2.0, [np.inf]])
    far = (non.size - np.searchsorted(non, thresholds, side="right")) / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    return thresholds, far, frr


def _interp_threshold(t0: float, t1: float, alpha: float, unique_scores: np.ndarray) -> float:
    if np.isfinite(t0) and np.isfinite(t1):
        return float(t0 + alpha * (t1 - t0))
    if np.isfinite(t0):
        return float(t0)
    if np.isfinite(t1):
        return float(t1)
    return float(unique_scores[0])


def eer(scores, labels=None) -> tuple[float, float]:
    """Equal error rate and the threshold at the FAR/FRR crossing.

    The crossing is solved on the straight segment joining the last operating
    point with FRR < FAR and the first with FRR >= FAR.
    """
    if isinstance(scores, TrialScoreSet):
        scores, labels = scores.scores, scores.labels
    thresholds, far, frr = operating_points(scores, labels)
    k = int(np.argmax(frr >= far))   # >= 1: FAR is 1 and FRR 0 at -inf
    j = k - 1
    d0 = far[j] - frr[j]
    d1 = frr[k] - far[k]
    alpha = d0 / (d0 + d1)
    rate = far[j] + alpha * (far[k] - far[j])
    return float(rate), _interp_threshold(thresholds[j], thresholds[k], alpha, np.unique(scores))


def min_dcf(scores, labels=None, params: DcfParams = DcfParams()) -> tuple[float, float]:
    """Normalised minimum detection cost and its threshold."""
    if isinstance(scores, TrialScoreSet):
        if isinstance(labels, DcfParams):
            params = labels
        scores, labels = scores.scores, scores.labels
    thresholds, far, frr = operating_points(scores, labels)
    cost = params.c_miss * params.p_target * frr + params.c_fa * (1 - params.p_target) * far
    norm = min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    i = int(np.argmin(cost))
    return float(cost[i] / norm), float(thresholds[i])


# -- protocol -----------------------------------------------------------------------------------
def duration_protocol(test: Waveform, mode: str = "full") -> Waveform:
    if mode == "full":
        return test
    if mode not in DURATIONS:
        raise ContractError(f"duration must be one of {DURATIONS}, got {mode!r}")
    return crop_middle(test, float(mode))


# -- files ----------------------------------------------------------------------------------------
def read_trials(path: str | Path) -> list[Trial]:
    """``label enroll test`` per line with label 1 (target) or 0."""
    trials = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ContractError(f"{path}:{n}: expected 'label enroll test' with label 0/1")
        trials.append(Trial(TARGET if parts[0] == "1" else NONTARGET, parts[1], parts[2]))
    if not trials:
        raise ContractError(f"{path}: no trials")
    return trials


def write_trials(path: str | Path, trials: Sequence[Trial]) -> None:
    lines = [f"{int(t.is_target)} {t.enroll_id} {t.test_id}" for t in trials]
    Path(path).write_text("\n".join(lines) + "\n")


def write_scores(path: str | Path, scored: TrialScoreSet) -> None:
    lines = [f"{s:.6f} {int(t.is_target)} {t.enroll_id} {t.test_id}"
             for t, s in zip(scored.trials, scored.scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path, backend: str = "cos") -> TrialScoreSet:
    trials, scores = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        s, label, enroll, test = line.split()
        trials.append(Trial(TARGET if label == "1" else NONTARGET, enroll, test))
        scores.append(float(s))
    return TrialScoreSet(trials, np.array(scores), backend)


@dataclass
class EvalReport:
    backend: str
    duration: str
    eer_percent: float
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    trials: int
    extra: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [f"backend {self.backend}", f"duration {self.duration}", f"trials {self.trials}",
                f"EER(%) {self.eer_percent:.2f}", f"EER_threshold {self.eer_threshold:.6f}",
                f"MinDCF {self.min_dcf:.3f}", f"MinDCF_threshold {self.dcf_threshold:.6f}"]


def evaluate_scores(scored: TrialScoreSet, duration: str = "full",
                    params: DcfParams = DcfParams()) -> EvalReport:
    rate, thr = eer(scored.scores, scored.labels)
    dcf, dthr = min_dcf(scored.scores, scored.labels, params)
    return EvalReport(scored.backend, duration, 100.0 * rate, thr, dcf, dthr, len(scored.trials))
