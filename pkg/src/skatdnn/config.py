"""Run configuration: an INI file with run / network / data / train / eval /
synth / analyze sections, validated before anything touches the disk."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .network import NetworkConfig
from .objectives import LrSchedule
from .scoring import BACKENDS, DURATIONS
from .synth import SynthSettings


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 25
    speakers_per_batch: int = 10
    crop_seconds: float = 2.0
    max_lr: float = 1e-3
    cycle_epochs: int = 25
    cycle_decay: float = 0.8
    warmup_epochs: float = 1.0
    lr_floor: float = 1e-8
    weight_decay: float = 2e-5
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    ap_init_w: float = 10.0
    ap_init_b: float = -5.0
    noise_prob: float = 0.5
    snr_low: float = 5.0
    snr_high: float = 20.0

    def validate(self) -> "TrainSettings":
        if self.epochs < 1 or self.speakers_per_batch < 2:
            raise ConfigurationError("train needs epochs >= 1 and speakers_per_batch >= 2")
        if self.crop_seconds < 0.5:
            raise ConfigurationError("crop_seconds must be >= 0.5")
        if not 0 <= self.noise_prob <= 1 or self.snr_low > self.snr_high:
            raise ConfigurationError("bad augmentation settings")
        if self.ap_init_w <= 0 or self.aam_scale <= 0 or self.aam_margin < 0:
            raise ConfigurationError("loss scales must be positive and the margin non-negative")
        self.schedule(1)
        return self

    def schedule(self, steps_per_epoch: int) -> LrSchedule:
        try:
            return LrSchedule(self.max_lr, self.cycle_epochs, self.cycle_decay,
                              self.warmup_epochs, self.lr_floor, steps_per_epoch)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc


@dataclass(frozen=True)
class EvalSettings:
    backend: str = "cos"
    duration: str = "full"
    top_k: int = 0             # 0: min(50000, cohort size)

    def validate(self) -> "EvalSettings":
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}")
        if self.duration not in DURATIONS:
            raise ConfigurationError(f"duration must be one of {DURATIONS}")
        if self.top_k < 0:
            raise ConfigurationError("top_k must be >= 0")
        return self


@dataclass(frozen=True)
class AnalyzeSettings:
    factors: tuple[float, ...] = (1.0, 2.0, 3.0)
    wav: str = ""              # empty: first held-out utterance of the dataset

    def validate(self) -> "AnalyzeSettings":
        if not self.factors or any(f < 1 for f in self.factors):
            raise ConfigurationError("upsampling factors must be >= 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = "data"
    run_dir: str = "run"
    preset: str = "toy"
    network: NetworkConfig = field(default_factory=NetworkConfig.toy)
    synth: SynthSettings = SynthSettings()
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()
    analyze: AnalyzeSettings = AnalyzeSettings()

    def validate(self) -> "RunConfig":
        try:
            self.network.validate()
        except ValueError as exc:
            raise ConfigurationError(f"network: {exc}") from exc
        self.synth.validate()
        self.train.validate()
        self.eval.validate()
        self.analyze.validate()
        if self.train.speakers_per_batch > self.synth.speakers:
            raise ConfigurationError("speakers_per_batch exceeds the number of speakers")
        return self

    def with_overrides(self, seed: int | None = None, backend: str | None = None,
                       duration: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, synth=replace(cfg.synth, seed=seed))
        if backend is not None or duration is not None:
            cfg = replace(cfg, eval=replace(cfg.eval, backend=backend or cfg.eval.backend,
                                            duration=duration or cfg.eval.duration))
        return cfg.validate()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": str(self.seed), "dataset": self.dataset, "run_dir": self.run_dir}
        net = {"preset": self.preset}
        net.update({k: _fmt(v) for k, v in self.network.to_dict().items()})
        parser["network"] = net
        for name in ("synth", "train", "eval", "analyze"):
            obj = getattr(self, name)
            parser[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def echo(self, directory: str | Path) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "config.ini").write_text(self.to_ini())


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _coerce(raw: str, template, key: str):
    try:
        if isinstance(template, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(template[0]) if template else float
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc


def _section(parser, name: str, obj):
    if not parser.has_section(name):
        return obj
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in parser[name].items():
        if key not in known:
            raise ConfigurationError(f"[{name}] unknown key {key!r}")
        updates[key] = _coerce(raw, getattr(obj, key), f"{name}.{key}")
    return replace(obj, **updates)


def load_config(path: str | Path | None) -> RunConfig:
    """Read and validate a run configuration; ``None`` gives the toy defaults."""
    if path is None:
        return RunConfig().validate()
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    allowed = {"run", "network", "synth", "train", "eval", "analyze"}
    extra = set(parser.sections()) - allowed
    if extra:
        raise ConfigurationError(f"unknown sections {sorted(extra)}")

    run = dict(parser["run"]) if parser.has_section("run") else {}
    unknown = set(run) - {"seed", "dataset", "run_dir"}
    if unknown:
        raise ConfigurationError(f"[run] unknown keys {sorted(unknown)}")
    seed = _coerce(run.get("seed", "0"), 0, "run.seed")

    net_items = dict(parser["network"]) if parser.has_section("network") else {}
    preset = net_items.pop("preset", "toy")
    variant = net_items.get("variant", "ska_tdnn")
    if preset == "toy":
        base = NetworkConfig.toy(variant)
    elif preset == "paper":
        base = NetworkConfig.paper(variant)
    else:
        raise ConfigurationError(f"network preset must be toy or paper, got {preset!r}")
    known = {f.name for f in fields(base)}
    updates = {}
    for key, raw in net_items.items():
        if key not in known:
            raise ConfigurationError(f"[network] unknown key {key!r}")
        updates[key] = _coerce(raw, getattr(base, key), f"network.{key}")
    try:
        network = replace(base, **updates)
    except ValueError as exc:
        raise ConfigurationError(f"network: {exc}") from exc

    synth = _section(parser, "synth", SynthSettings())
    if "seed" not in (parser["synth"] if parser.has_section("synth") else {}):
        synth = replace(synth, seed=seed)
    cfg = RunConfig(seed=seed, dataset=run.get("dataset", "data"), run_dir=run.get("run_dir", "run"),
                    preset=preset, network=network, synth=synth,
                    train=_section(parser, "train", TrainSettings()),
                    eval=_section(parser, "eval", EvalSettings()),
                    analyze=_section(parser, "analyze", AnalyzeSettings()))
    return cfg.validate()
