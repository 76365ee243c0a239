import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from skatdnn import pipeline
from skatdnn.cli import main
from skatdnn.config import RunConfig, load_config
from skatdnn.errors import ConfigurationError
from skatdnn.features import crop_middle, read_wav
from skatdnn.network import NetworkConfig, embed, load_checkpoint, read_embeddings
from skatdnn.scoring import (Trial, TARGET, NONTARGET, cosine_score, read_scores, snorm,
                             write_trials)
from skatdnn.synth import MANIFEST, SynthSettings, min_pitch_gap, read_manifest, speaker_specs

TINY = """
[run]
seed = 5
dataset = {root}/data
run_dir = {root}/run

[synth]
speakers = 4
utterances = 7
seconds = 1.0
heldout = 3
target_trials = 5
nontarget_trials = 5

[train]
epochs = 2
cycle_epochs = 4
speakers_per_batch = 2
crop_seconds = 0.5
"""


def write_config(root: Path, text: str = TINY, **extra: str) -> Path:
    body = text.format(root=root)
    for section, lines in extra.items():
        body += f"\n[{section}]\n{lines}\n"
    path = root / "run.ini"
    path.write_text(body)
    return path


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A synthesised tiny corpus and a 2-epoch toy run."""
    root = tmp_path_factory.mktemp("tiny")
    ini = write_config(root)
    assert main(["synth", "--config", str(ini)]) == 0
    assert main(["train", "--config", str(ini)]) == 0
    return root, ini, load_config(ini)


# -- configuration --------------------------------------------------------------------------------
def test_default_config_is_toy():
    cfg = load_config(None)
    assert cfg.network == NetworkConfig.toy() and cfg.synth == SynthSettings()
    assert cfg.train.max_lr == 1e-3 and cfg.train.cycle_decay == 0.8 and cfg.train.weight_decay == 2e-5


def test_config_overrides_and_echo_roundtrip(tmp_path):
    ini = write_config(tmp_path, network="variant = ecapa_cnn_fwska\nscale_count = 2",
                       eval="backend = sn\ntop_k = 3")
    cfg = load_config(ini)
    assert cfg.network.variant == "ecapa_cnn_fwska" and cfg.network.scale_count == 2
    assert cfg.synth.seed == 5 and cfg.eval.backend == "sn" and cfg.eval.top_k == 3
    cfg.echo(tmp_path / "echo")
    assert load_config(tmp_path / "echo" / "config.ini") == cfg
    moved = cfg.with_overrides(seed=9, duration="1.5")
    assert moved.seed == moved.synth.seed == 9 and moved.eval.duration == "1.5"


def test_paper_preset(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[network]\npreset = paper\n")
    assert load_config(path).network == NetworkConfig.paper()


@pytest.mark.parametrize("extra", [
    {"bogus": "a = 1"},
    {"train": "epochs_total = 3"},
    {"network": "preset = huge"},
    {"network": "toy_scale_factor = 3"},
    {"network": "tdnn_kernel = 4"},
    {"train": "epochs = three"},
    {"eval": "backend = plda"},
    {"synth": "heldout = 6"},
    {"train": "speakers_per_batch = 9"},
])
def test_config_rejections(tmp_path, extra):
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, **extra))


def test_bad_config_fails_before_any_write(tmp_path):
    ini = write_config(tmp_path, network="toy_scale_factor = 3")
    out = tmp_path / "never"
    for cmd in ("synth", "train"):
        assert main([cmd, "--config", str(ini), "--out", str(out)]) == 2
    assert not out.exists()


def test_missing_inputs_exit_2(tmp_path, capsys):
    ini = write_config(tmp_path)
    assert main(["train", "--config", str(ini)]) == 2          # no dataset yet
    assert main(["eval", "--config", str(ini)]) == 2
    assert main(["analyze-attn", "--config", str(tmp_path / "none.ini")]) == 2
    assert "error" in capsys.readouterr().err


# -- synthesis --------------------------------------------------------------------------------------
def test_speaker_specs_are_distinct():
    specs = speaker_specs(20, seed=0)
    assert len({s.speaker_id for s in specs}) == 20
    assert min_pitch_gap(specs) >= 3.0
    with pytest.raises(ConfigurationError):
        speaker_specs(400, seed=0)


def test_synth_is_byte_identical(tmp_path):
    cfg = RunConfig(synth=SynthSettings(speakers=3, utterances=4, seconds=0.6, heldout=2,
                                        target_trials=3, nontarget_trials=3, seed=7))
    a, b = pipeline.run_synth(cfg, tmp_path / "a"), pipeline.run_synth(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    other = pipeline.run_synth(RunConfig(synth=SynthSettings(3, 4, 0.6, 2, 3, 3, seed=8)), tmp_path / "c")
    assert (other / MANIFEST).read_text() == (a / MANIFEST).read_text()
    assert (other / "wavs/spk000/utt000.wav").read_bytes() != (a / "wavs/spk000/utt000.wav").read_bytes()


def test_default_corpus_manifest(tmp_path):
    out = pipeline.run_synth(RunConfig(), tmp_path / "full")
    rows = read_manifest(out)
    assert len(rows) == 200 and len(list(out.rglob("*.wav"))) == 200
    assert {spk for spk, _, _ in rows} == {f"spk{i:03d}" for i in range(20)}
    assert sum(split == "heldout" for _, _, split in rows) == 80
    for _, rel, _ in rows[:5]:
        assert abs(read_wav(out / rel).seconds - 3.0) < 1e-9
    trials = (out / "trials.txt").read_text().splitlines()
    assert len(trials) == 200 and sum(t.startswith("1 ") for t in trials) == 100


# -- training -----------------------------------------------------------------------------------------
def test_train_outputs(tiny):
    root, _, cfg = tiny
    run = root / "run"
    assert (run / "config.ini").exists() and (run / "model.ckpt").exists()
    lines = (run / "metrics.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tloss\tlr\tseconds" and len(lines) == 3
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt"]
    digest, blobs = load_checkpoint(run / "model.ckpt")
    assert digest == cfg.network.digest() and blobs["meta/epoch"] == 1.0


def test_resume_is_bit_identical(tiny, tmp_path):
    root, ini, cfg = tiny
    straight = tmp_path / "straight"
    pipeline.train(cfg, straight, epochs=2)
    split = tmp_path / "split"
    pipeline.train(cfg, split, epochs=1)
    result = pipeline.train(cfg, split, resume=True)
    assert result.epochs == [1]
    _, a = load_checkpoint(straight / "model.ckpt")
    _, b = load_checkpoint(split / "model.ckpt")
    assert a.keys() == b.keys()
    for key in a:
        np.testing.assert_array_equal(a[key], b[key], err_msg=key)
    assert (straight / "metrics.tsv").read_text().split("\t")[:5] == \
        (split / "metrics.tsv").read_text().split("\t")[:5]


def test_resume_rejects_other_network(tiny, tmp_path):
    root, _, cfg = tiny
    other = RunConfig(seed=cfg.seed, dataset=cfg.dataset, network=NetworkConfig.toy("ecapa_msska"),
                      synth=cfg.synth, train=cfg.train)
    with pytest.raises(ConfigurationError):
        pipeline.train(other, root / "run", resume=True)


def test_loss_decreases(tmp_path):
    text = TINY.replace("speakers = 4", "speakers = 8").replace("utterances = 7", "utterances = 6") \
        .replace("heldout = 3", "heldout = 2").replace("target_trials = 5", "target_trials = 4") \
        .replace("nontarget_trials = 5", "nontarget_trials = 4").replace("epochs = 2", "epochs = 6") \
        .replace("cycle_epochs = 4", "cycle_epochs = 6").replace("speakers_per_batch = 2", "speakers_per_batch = 4")
    ini = write_config(tmp_path, text.replace("crop_seconds = 0.5", "crop_seconds = 0.8\nnoise_prob = 0"))
    cfg = load_config(ini)
    pipeline.run_synth(cfg)
    losses = pipeline.train(cfg).losses
    assert len(losses) == 6 and np.mean(losses[-2:]) < np.mean(losses[:2])


def test_divergence_exits_3(tiny, tmp_path):
    root, ini, _ = tiny
    blown = tmp_path / "nan.ini"
    blown.write_text(ini.read_text().replace("crop_seconds = 0.5", "crop_seconds = 0.5\naam_scale = 1e308"))
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(blown), "--out", str(tmp_path / "nan")])
    assert code == 3


# -- extraction and scoring -------------------------------------------------------------------------------
def test_extract_writes_every_utterance(tiny, tmp_path):
    root, ini, cfg = tiny
    assert main(["extract", "--config", str(ini)]) == 0
    records = read_embeddings(root / "run" / "embeddings.txt")
    assert len(records) == 28
    rel = next(iter(records))
    net = pipeline.load_model(cfg)
    np.testing.assert_allclose(records[rel].embedding,
                               embed(net, read_wav(root / "data" / rel)).embedding, atol=1e-12)
    listing = tmp_path / "list.txt"
    listing.write_text(f"{rel}\n")
    copy = tmp_path / "run"
    shutil.copytree(root / "run", copy)
    assert main(["extract", "--config", str(ini), "--wav-list", str(listing), "--out", str(copy)]) == 0
    assert list(read_embeddings(copy / "embeddings.txt")) == [rel]


def _heldout(root):
    return [rel for _, rel, split in read_manifest(root / "data") if split == "heldout"]


def test_separable_trials_score_perfectly(tiny, capsys):
    root, ini, _ = tiny
    held = _heldout(root)
    trials = [Trial(TARGET, u, u) for u in held[:4]]
    trials += [Trial(NONTARGET, held[0], held[-1]), Trial(NONTARGET, held[3], held[5])]
    write_trials(root / "separable.txt", trials)
    assert main(["eval", "--config", str(ini), "--trials", str(root / "separable.txt")]) == 0
    out = capsys.readouterr().out
    assert "EER(%) 0.00" in out and "MinDCF 0.000" in out
    assert (root / "run" / "report_cos_full.txt").read_text().startswith("backend cos")


def test_sn_backend_matches_oracle(tiny):
    root, _, cfg = tiny
    scored, path = pipeline.score(cfg, backend="sn")
    assert path.name == "scores_sn_full.txt" and len(scored.trials) == 10
    net = pipeline.load_model(cfg)
    emb = {}

    def get(rel):
        if rel not in emb:
            emb[rel] = embed(net, read_wav(root / "data" / rel)).embedding
        return emb[rel]
    cohort = [get(rel) for _, rel, split in read_manifest(root / "data") if split == "train"]
    assert len(cohort) == 16
    raw = np.array([cosine_score(get(t.enroll_id), get(t.test_id)) for t in scored.trials])
    oracle = snorm(raw, [get(t.enroll_id) for t in scored.trials],
                   [get(t.test_id) for t in scored.trials], cohort, 16)
    np.testing.assert_allclose(scored.scores, oracle, atol=1e-10)
    np.testing.assert_allclose(read_scores(path, "sn").scores, oracle, atol=5e-7)


def test_duration_only_touches_test_side(tiny):
    root, _, cfg = tiny
    scored, path = pipeline.score(cfg, backend="cos", duration="1.5")
    assert path.name == "scores_cos_1.5.txt"
    net = pipeline.load_model(cfg)
    for t, s in zip(scored.trials[:4], scored.scores):
        enroll = embed(net, read_wav(root / "data" / t.enroll_id)).embedding
        test = embed(net, crop_middle(read_wav(root / "data" / t.test_id), 1.5)).embedding
        assert abs(s - cosine_score(enroll, test)) < 1e-12


def test_tta_backend_runs(tiny):
    _, _, cfg = tiny
    scored, _ = pipeline.score(cfg, backend="tta")
    assert np.all(np.abs(scored.scores) <= 1.0) and len(scored.scores) == 10


# -- attention analysis ---------------------------------------------------------------------------------------
def test_analyze_attention_dumps(tiny, capsys):
    root, ini, cfg = tiny
    out = root / "attn"
    assert main(["analyze-attn", "--config", str(ini), "--out", str(out)]) == 0
    assert "trend" in capsys.readouterr().out
    channels = pipeline.load_model(cfg).trace_block.cwska.cfg.channels
    for f in (1, 2, 3):
        lines = (out / f"attention_x{f}.csv").read_text().splitlines()
        assert lines[0] == "channel,a_3x3,a_5x5" and len(lines) == channels + 1
        values = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
        assert np.all(np.abs(values.sum(axis=1) - 1) <= 1e-6)
    assert (out / "config.ini").exists() and (out / "summary.txt").exists()
    again = root / "attn2"
    assert main(["analyze-attn", "--config", str(ini), "--out", str(again), "--factors", "1"]) == 0
    assert (again / "attention_x1.csv").read_bytes() == (out / "attention_x1.csv").read_bytes()


def test_analyze_attention_rejects_mismatch(tiny, tmp_path):
    root, ini, _ = tiny
    bad = tmp_path / "msska.ini"
    bad.write_text(ini.read_text() + "\n[network]\nvariant = ecapa_msska\n")
    assert main(["analyze-attn", "--config", str(bad), "--out", str(tmp_path / "a")]) == 2
    fw = tmp_path / "fw.ini"
    fw.write_text(ini.read_text() + "\n[network]\nvariant = ecapa_cnn_fcwska\n")
    assert main(["analyze-attn", "--config", str(fw), "--out", str(tmp_path / "b")]) == 2
    assert main(["analyze-attn", "--config", str(ini), "--factors", "1,x"]) == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "skatdnn", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for cmd in ("synth", "train", "extract", "score", "eval", "analyze-attn"):
        assert cmd in done.stdout
