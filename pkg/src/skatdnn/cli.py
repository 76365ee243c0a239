"""Command-line entry point: ``skatdnn <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigurationError, ContractError, NumericError
from .scoring import BACKENDS, DURATIONS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMMANDS = ("synth", "train", "extract", "score", "eval", "analyze-attn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skatdnn", description="SKA-TDNN speaker verification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="INI run configuration (default: toy settings)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (dataset dir for synth, run dir otherwise)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="generate the synthetic speaker corpus"))
    p = common(sub.add_parser("train", help="train a network"))
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in total")
    p = common(sub.add_parser("extract", help="write embeddings for a list of WAVs"))
    p.add_argument("--wav-list", help="one WAV path per line (default: whole dataset)")
    for name, help_ in (("score", "write a trial score file"), ("eval", "score and report EER / MinDCF")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--trials", help="trial list (default: the dataset's trials.txt)")
        p.add_argument("--backend", choices=BACKENDS)
        p.add_argument("--duration", choices=DURATIONS)
    p = common(sub.add_parser("analyze-attn", help="dump channel-wise SKA weights per upsampling factor"))
    p.add_argument("--wav", help="input utterance (default: first held-out utterance)")
    p.add_argument("--factors", help="comma-separated upsampling factors (default 1,2,3)")
    p.add_argument("--checkpoint", help="checkpoint file (default: <run dir>/model.ckpt)")
    p.add_argument("--run-dir", help="run directory holding the trained model")
    return parser


def run(args: argparse.Namespace) -> int:
    from . import pipeline

    cfg = load_config(args.config).with_overrides(seed=args.seed,
                                                  backend=getattr(args, "backend", None),
                                                  duration=getattr(args, "duration", None))
    if args.command == "synth":
        out = pipeline.run_synth(cfg, args.out)
        print(f"wrote dataset to {out}")
    elif args.command == "train":
        result = pipeline.train(cfg, args.out, resume=args.resume, epochs=args.epochs)
        for e, loss in zip(result.epochs, result.losses):
            print(f"epoch {e} loss {loss:.4f}")
        print(f"checkpoint {result.checkpoint}")
    elif args.command == "extract":
        print(f"wrote {pipeline.extract(cfg, args.out, args.wav_list)}")
    elif args.command == "score":
        _, path = pipeline.score(cfg, args.out, args.trials)
        print(f"wrote {path}")
    elif args.command == "eval":
        report, path = pipeline.evaluate(cfg, args.out, args.trials)
        print("\n".join(report.lines()))
        print(f"wrote {path}")
    elif args.command == "analyze-attn":
        factors = None
        if args.factors:
            try:
                factors = [float(f) for f in args.factors.split(",") if f.strip()]
            except ValueError as exc:
                raise ConfigurationError(f"bad --factors {args.factors!r}") from exc
        dumps = pipeline.analyze_attention(cfg, args.run_dir, args.out, args.wav, factors,
                                           args.checkpoint)
        for d in dumps:
            print(f"factor {d.factor:g}: {d.path}")
        print((dumps[0].path.parent / "summary.txt").read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigurationError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
