"""End-to-end commands: synth, train, extract, score/eval and attention analysis."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigurationError, ContractError, NumericError
from .features import Waveform, add_noise, features, random_crop, read_wav, upsample
from .network import (Network, build, embed, load_checkpoint, read_embeddings,
                      save_checkpoint, write_embeddings)
from .objectives import AamHead, Adam, ApHead, combined_loss
from .scoring import (EvalReport, TrialScoreSet, cosine_score, duration_protocol,
                      evaluate_scores, network_embedder, read_trials, snorm, tta_segments,
                      tta_from_embeddings, write_scores)
from .synth import TRIALS, read_manifest, synth_dataset

log = logging.getLogger("skatdnn")

CHECKPOINTS = "checkpoints"
MODEL = "model.ckpt"
METRICS = "metrics.tsv"
EMBEDDINGS = "embeddings.txt"


def run_synth(cfg: RunConfig, out: str | Path | None = None) -> Path:
    out = Path(out or cfg.dataset)
    synth_dataset(out, cfg.synth)
    cfg.echo(out)
    return out


# -- training ------------------------------------------------------------------------------
class Trainer:
    """Holds the network, loss heads and optimiser for one run."""

    def __init__(self, cfg: RunConfig, speakers: list[str]):
        self.cfg = cfg
        self.speakers = speakers
        self.net = build(cfg.network, cfg.seed)
        head_rng = np.random.default_rng([cfg.seed, 1])
        t = cfg.train
        self.aam = AamHead(len(speakers), cfg.network.embedding_dim, head_rng,
                           t.aam_margin, t.aam_scale)
        self.ap = ApHead(t.ap_init_w, t.ap_init_b)
        self.named = ([("net/" + n, p) for n, p in self.net.named_parameters()]
                      + [("aam/" + n, p) for n, p in self.aam.named_parameters()]
                      + [("ap/" + n, p) for n, p in self.ap.named_parameters()])
        self.adam = Adam(self.named, weight_decay=t.weight_decay)
        self.epoch = -1   # last completed epoch

    def blobs(self) -> dict[str, np.ndarray]:
        state = {"meta/epoch": np.array(float(self.epoch))}
        for prefix, module in (("net/", self.net), ("aam/", self.aam), ("ap/", self.ap)):
            state.update({prefix + k: v for k, v in module.state_dict().items()})
        state.update(self.adam.state_dict())
        return state

    def restore(self, blobs: dict[str, np.ndarray]) -> None:
        for prefix, module in (("net/", self.net), ("aam/", self.aam), ("ap/", self.ap)):
            module.load_state_dict({k[len(prefix):]: v for k, v in blobs.items()
                                    if k.startswith(prefix)})
        self.adam.load_state_dict(blobs)
        self.epoch = int(blobs["meta/epoch"])

    def step(self, feats: np.ndarray, labels: np.ndarray, lr: float) -> float:
        for m in (self.net, self.aam, self.ap):
            m.zero_grad()
        loss = combined_loss(self.net(T.Tensor(feats)), labels, self.aam, self.ap)
        loss.backward()
        self.adam.step(lr)
        return float(loss.data)


def epoch_batches(utterances: dict[str, list[Waveform]], speakers_per_batch: int,
                  rng: np.random.Generator) -> list[list[tuple[str, Waveform, Waveform]]]:
    """Pairs of same-speaker utterances grouped so no batch repeats a speaker."""
    pairs = {}
    for spk in sorted(utterances):
        order = rng.permutation(len(utterances[spk]))
        waves = [utterances[spk][i] for i in order]
        pairs[spk] = [(waves[i], waves[i + 1]) for i in range(0, len(waves) - 1, 2)]
    rounds = max(len(p) for p in pairs.values())
    batches = []
    for r in range(rounds):
        members = [s for s in sorted(pairs) if r < len(pairs[s])]
        members = [members[i] for i in rng.permutation(len(members))]
        for i in range(0, len(members), speakers_per_batch):
            chunk = members[i:i + speakers_per_batch]
            if len(chunk) >= 2:
                batches.append([(s, *pairs[s][r]) for s in chunk])
    return batches


def _prepare(wave_: Waveform, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    t = cfg.train
    crop = random_crop(wave_, t.crop_seconds, rng)
    if rng.random() < t.noise_prob:
        kind = "white" if rng.random() < 0.5 else "babble"
        crop = add_noise(crop, rng.uniform(t.snr_low, t.snr_high), rng, kind)
    return features(crop)


def _latest_checkpoint(run_dir: Path) -> Path | None:
    found = sorted((run_dir / CHECKPOINTS).glob("epoch_*.ckpt"))
    return found[-1] if found else None


@dataclass
class TrainResult:
    epochs: list[int]
    losses: list[float]
    checkpoint: Path


def train(cfg: RunConfig, run_dir: str | Path | None = None, resume: bool = False,
          epochs: int | None = None) -> TrainResult:
    """Train with per-epoch checkpoints; ``epochs`` caps this invocation's last epoch."""
    run_dir = Path(run_dir or cfg.run_dir)
    rows = read_manifest(cfg.dataset)
    train_rows = [(spk, rel) for spk, rel, split in rows if split == "train"]
    speakers = sorted({spk for spk, _ in train_rows})
    label_of = {s: i for i, s in enumerate(speakers)}
    utterances: dict[str, list[Waveform]] = {}
    for spk, rel in train_rows:
        utterances.setdefault(spk, []).append(read_wav(Path(cfg.dataset) / rel))

    trainer = Trainer(cfg, speakers)
    latest = _latest_checkpoint(run_dir) if resume else None
    if latest is not None:
        trainer.restore(_checked_blobs(latest, cfg))
        log.info("resumed from %s", latest)
    cfg.echo(run_dir)
    (run_dir / CHECKPOINTS).mkdir(parents=True, exist_ok=True)
    metrics = run_dir / METRICS
    if latest is None or not metrics.exists():
        metrics.write_text("epoch\tloss\tlr\tseconds\n")

    last = min(cfg.train.epochs, epochs if epochs is not None else cfg.train.epochs)
    done, losses = [], []
    for epoch in range(trainer.epoch + 1, last):
        started = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch, 11])
        batches = epoch_batches(utterances, cfg.train.speakers_per_batch, rng)
        schedule = cfg.train.schedule(len(batches))
        batch_losses, lr = [], 0.0
        for step, batch in enumerate(batches):
            feats, labels = [], []
            for spk, a, b in batch:
                feats += [_prepare(a, cfg, rng), _prepare(b, cfg, rng)]
                labels += [label_of[spk]] * 2
            lr = schedule.lr_at(epoch, step)
            try:
                loss = trainer.step(np.stack(feats), np.array(labels), lr)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch} step {step}: loss {loss}")
            batch_losses.append(loss)
        trainer.epoch = epoch
        mean_loss = float(np.mean(batch_losses))
        seconds = time.perf_counter() - started
        with open(metrics, "a") as fh:
            fh.write(f"{epoch}\t{mean_loss:.6f}\t{lr:.6e}\t{seconds:.1f}\n")
        log.info("epoch %d loss %.4f lr %.2e (%.1fs)", epoch, mean_loss, lr, seconds)
        path = run_dir / CHECKPOINTS / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(path, cfg.network, trainer.blobs())
        save_checkpoint(run_dir / MODEL, cfg.network, trainer.blobs())
        done.append(epoch)
        losses.append(mean_loss)
    return TrainResult(done, losses, run_dir / MODEL)


def _checked_blobs(path: Path, cfg: RunConfig) -> dict[str, np.ndarray]:
    if not path.exists():
        raise ConfigurationError(f"{path}: checkpoint not found (run train first)")
    digest, blobs = load_checkpoint(path)
    if digest != cfg.network.digest():
        raise ConfigurationError(f"{path}: checkpoint was trained with a different network config")
    return blobs


def load_model(cfg: RunConfig, run_dir: str | Path | None = None,
               checkpoint: str | Path | None = None) -> Network:
    path = Path(checkpoint) if checkpoint else Path(run_dir or cfg.run_dir) / MODEL
    blobs = _checked_blobs(path, cfg)
    net = build(cfg.network, cfg.seed)
    net.load_state_dict({k[4:]: v for k, v in blobs.items() if k.startswith("net/")})
    return net.eval()


# -- extraction and scoring ----------------------------------------------------------------------
def extract(cfg: RunConfig, run_dir: str | Path | None = None,
            wav_list: str | Path | None = None) -> Path:
    run_dir = Path(run_dir or cfg.run_dir)
    net = load_model(cfg, run_dir)
    if wav_list:
        ids = [line.strip() for line in Path(wav_list).read_text().splitlines() if line.strip()]
    else:
        ids = [rel for _, rel, _ in read_manifest(cfg.dataset)]
    records = [embed(net, read_wav(_resolve(cfg, i)), i) for i in ids]
    out = run_dir / EMBEDDINGS
    write_embeddings(out, records)
    return out


def _resolve(cfg: RunConfig, utt: str) -> Path:
    p = Path(utt)
    return p if p.is_absolute() else Path(cfg.dataset) / p


class EmbeddingCache:
    """Full-utterance embeddings from ``embeddings.txt`` when present, else computed."""

    def __init__(self, cfg: RunConfig, net: Network, run_dir: Path):
        self.cfg, self.net = cfg, net
        path = run_dir / EMBEDDINGS
        self.full = {k: r.embedding for k, r in read_embeddings(path).items()} if path.exists() else {}
        self.cropped: dict[tuple[str, str], np.ndarray] = {}
        self.segments: dict[tuple[str, str], np.ndarray] = {}
        self.embedder = network_embedder(net)

    def wave(self, utt: str, duration: str = "full") -> Waveform:
        return duration_protocol(read_wav(_resolve(self.cfg, utt)), duration)

    def get(self, utt: str, duration: str = "full") -> np.ndarray:
        if duration == "full":
            if utt not in self.full:
                self.full[utt] = embed(self.net, self.wave(utt), utt).embedding
            return self.full[utt]
        key = (utt, duration)
        if key not in self.cropped:
            self.cropped[key] = embed(self.net, self.wave(utt, duration), utt).embedding
        return self.cropped[key]

    def tta(self, utt: str, duration: str = "full") -> np.ndarray:
        key = (utt, duration)
        if key not in self.segments:
            self.segments[key] = self.embedder(tta_segments(self.wave(utt, duration)))
        return self.segments[key]


def score(cfg: RunConfig, run_dir: str | Path | None = None, trials_path: str | Path | None = None,
          backend: str | None = None, duration: str | None = None) -> tuple[TrialScoreSet, Path]:
    """Score every trial; only the test side is shortened by ``duration``."""
    run_dir = Path(run_dir or cfg.run_dir)
    backend = backend or cfg.eval.backend
    duration = duration or cfg.eval.duration
    trials = read_trials(trials_path or Path(cfg.dataset) / TRIALS)
    cache = EmbeddingCache(cfg, load_model(cfg, run_dir), run_dir)
    if backend == "tta":
        scores = [tta_from_embeddings(cache.tta(t.enroll_id), cache.tta(t.test_id, duration))
                  for t in trials]
    else:
        enroll = np.array([cache.get(t.enroll_id) for t in trials])
        test = np.array([cache.get(t.test_id, duration) for t in trials])
        scores = np.array([cosine_score(e, x) for e, x in zip(enroll, test)])
        if backend == "sn":
            cohort_ids = [rel for _, rel, split in read_manifest(cfg.dataset) if split == "train"]
            if not cohort_ids:
                raise ContractError("s-norm needs training utterances as the cohort")
            cohort = np.array([cache.get(c) for c in cohort_ids])
            top_k = cfg.eval.top_k or min(50000, len(cohort_ids))
            scores = snorm(scores, enroll, test, cohort, top_k)
    scored = TrialScoreSet(trials, np.asarray(scores), backend)
    out = run_dir / f"scores_{backend}_{duration}.txt"
    write_scores(out, scored)
    return scored, out


def evaluate(cfg: RunConfig, run_dir: str | Path | None = None, trials_path: str | Path | None = None,
             backend: str | None = None, duration: str | None = None) -> tuple[EvalReport, Path]:
    run_dir = Path(run_dir or cfg.run_dir)
    scored, _ = score(cfg, run_dir, trials_path, backend, duration)
    report = evaluate_scores(scored, duration or cfg.eval.duration)
    out = run_dir / f"report_{report.backend}_{report.duration}.txt"
    out.write_text("\n".join(report.lines()) + "\n")
    return report, out


# -- attention analysis -------------------------------------------------------------------------
@dataclass
class AttentionDump:
    factor: float
    kernels: tuple[int, ...]
    weights: np.ndarray          # (channels, branches)
    path: Path


def attention_weights(net: Network, wave_: Waveform, factor: float) -> np.ndarray:
    """Per-channel branch weights of the traced channel-wise SKA layer."""
    layer = net.trace_block.cwska
    if layer is None:
        raise ConfigurationError(f"variant {net.config.variant} has no channel-wise SKA front block")
    layer.capture = True
    try:
        with T.no_grad(), net.evaluating():
            net.frame_features(T.Tensor(features(upsample(wave_, factor))[None]))
        trace = layer.last_trace
    finally:
        layer.capture = False
        layer.last_trace = None
    return np.stack([w[0] for w in trace.weights], axis=1)


def analyze_attention(cfg: RunConfig, run_dir: str | Path | None = None,
                      out: str | Path | None = None, wav: str | Path | None = None,
                      factors=None, checkpoint: str | Path | None = None) -> list[AttentionDump]:
    run_dir = Path(run_dir or cfg.run_dir)
    if not cfg.network.channel_attention or not cfg.network.has_front:
        raise ConfigurationError(f"variant {cfg.network.variant} has no fcwSKA front block to trace")
    net = load_model(cfg, run_dir, checkpoint)
    wav = wav or cfg.analyze.wav
    if not wav:
        wav = next(rel for _, rel, split in read_manifest(cfg.dataset) if split == "heldout")
    wave_ = read_wav(_resolve(cfg, str(wav)))
    factors = tuple(factors or cfg.analyze.factors)
    out = Path(out or run_dir / "attention")
    cfg.echo(out)
    kernels = net.trace_block.cwska.cfg.kernel_sizes
    header = "channel," + ",".join(f"a_{k}x{k}" for k in kernels)
    dumps = []
    for f in factors:
        weights = attention_weights(net, wave_, f)
        path = out / f"attention_x{f:g}.csv"
        lines = [header] + [f"{c}," + ",".join(f"{v:.8f}" for v in row)
                            for c, row in enumerate(weights)]
        path.write_text("\n".join(lines) + "\n")
        dumps.append(AttentionDump(f, kernels, weights, path))
    (out / "summary.txt").write_text(trend_summary(dumps))
    return dumps


def trend_summary(dumps: list[AttentionDump]) -> str:
    """Mean branch weights per factor and whether the larger kernel gains weight."""
    lines = ["factor\t" + "\t".join(f"mean_a_{k}x{k}" for k in dumps[0].kernels) + "\tselectivity"]
    for d in dumps:
        lines.append(f"{d.factor:g}\t" + "\t".join(f"{m:.6f}" for m in d.weights.mean(axis=0))
                     + f"\t{selectivity(d.weights):.6f}")

    def verdict(values) -> str:
        return "yes" if all(b > a for a, b in zip(values, values[1:])) else "no"
    k = dumps[0].kernels[-1]
    lines.append(f"trend a_{k}x{k} increases with upsampling: "
                 f"{verdict([d.weights[:, -1].mean() for d in dumps])}")
    lines.append(f"trend selectivity increases with upsampling: "
                 f"{verdict([selectivity(d.weights) for d in dumps])}")
    return "\n".join(lines) + "\n"


def selectivity(weights: np.ndarray) -> float:
    """Mean distance of the branch weights from the uniform 1/N split."""
    return float(np.abs(weights - 1.0 / weights.shape[1]).mean())
