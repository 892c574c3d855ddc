import csv
import io
import math

import numpy as np
import pytest

from chanadv import cli
from chanadv.checkpoint import load_checkpoint, save_checkpoint, state_dict
from chanadv.config import ConfigError, load_run_config, parse_overrides
from chanadv.data import SynthCorpusConfig, read_features, save_corpus, synth_corpus, write_wav
from chanadv.model import build_model
from chanadv.train import TrainConfig

TINY = """\
[corpus]
n_train_speakers = 8
n_dev_speakers = 3
n_test_speakers = 3
utts_per_channel = 4
frames = 12
feature_dim = 8

[train]
epochs = 2
speakers_per_batch = 2
utts_per_speaker = 2
window = 12
widths = 2,2,2,2,2
embed_dim = 4
pool_stages = 2
d2_hidden = 4
"""


@pytest.fixture
def tiny(tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY)
    assert cli.main(["synth", "--config", str(ini), "--out", str(tmp_path / "corpus")]) == 0
    return tmp_path, ini


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


# ----------------------------------------------------------------- config


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlr = 0.3\nseed = 4\n[corpus]\nseed = 5\n")
    cfg = load_run_config(ini, env={})
    assert cfg.train.lr == 0.3 and cfg.train.seed == 4 and cfg.corpus.seed == 5
    cfg = load_run_config(ini, env={"CAT_SEED": "11"})
    assert cfg.train.seed == 11 and cfg.corpus.seed == 11
    cfg = load_run_config(ini, parse_overrides(["--seed", "2", "--train.lr=0.01", "--widths", "1,2,3,4,5"]),
                          env={"CAT_SEED": "11"})
    assert cfg.train.seed == 2 and cfg.train.lr == 0.01 and cfg.train.widths == [1, 2, 3, 4, 5]
    assert cfg.eval.topn == [1, 5, 10]


@pytest.mark.parametrize("text,match", [("[train]\nlrr = 1\n", "lrr"), ("[bogus]\nx = 1\n", "bogus"),
                                        ("[train]\nepochs = many\n", "epochs")])
def test_config_errors_name_the_key(tmp_path, text, match):
    ini = tmp_path / "c.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_run_config(ini, env={})


def test_override_parsing_errors():
    with pytest.raises(ConfigError):
        parse_overrides(["epochs", "3"])
    with pytest.raises(ConfigError):
        parse_overrides(["--epochs"])


# ------------------------------------------------------------------ synth


def test_synth_is_deterministic_and_strict(tiny, capsys):
    tmp, ini = tiny
    assert cli.main(["synth", "--config", str(ini), "--out", str(tmp / "again")]) == 0
    for rel in ("train.jsonl", "dev.jsonl", "test.jsonl", "corpus.json", "feats/dev-s0008-c1-u03.catf"):
        assert (tmp / "corpus" / rel).read_bytes() == (tmp / "again" / rel).read_bytes()
    assert cli.main(["synth", "--config", str(ini), "--out", str(tmp / "x"), "--noise", "1"]) == 2
    assert "noise" in capsys.readouterr().err


# ------------------------------------------------------------------ fbank


def test_fbank_command(tmp_path, capsys):
    wavs = tmp_path / "wavs"
    wavs.mkdir()
    (wavs / "tone.wav").write_bytes(write_wav(0.1 * np.sin(np.arange(16000) * 0.3), 16000))
    assert cli.main(["fbank", str(wavs / "tone.wav"), "--out", str(tmp_path / "f1")]) == 0
    assert read_features(tmp_path / "f1" / "tone.catf").shape == (98, 64)
    (wavs / "notes.txt").write_text("not audio")
    assert cli.main(["fbank", str(wavs), "--out", str(tmp_path / "f2"), "--threads", "2"]) == 1
    assert (tmp_path / "f2" / "tone.catf").exists()
    assert "notes.txt: FAILED" in capsys.readouterr().err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["fbank", str(empty), "--out", str(tmp_path / "f3")]) == 0
    assert "0 files" in capsys.readouterr().out


# ------------------------------------------------------------------ train


def test_train_outputs_and_zero_epochs(tiny):
    tmp, ini = tiny
    run = tmp / "run"
    assert cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(run),
                     "--arch", "cnn"]) == 0
    assert sorted(p.name for p in (run / "epochs").iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt",
                                                                 "epoch_002.ckpt"]
    rows = read_csv((run / "train_log.csv").read_text())
    assert list(rows[0]) == ["step", "L_s", "L_T", "L_ch", "total", "lr"]
    params, cfg = load_checkpoint(run / "best.ckpt")
    assert cfg["model"]["arch"] == "cnn" and cfg["train"]["reduction"] == "mean" and cfg["train"]["delta"] == 0.1

    zero = tmp / "zero"
    assert cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(zero),
                     "--arch", "cat", "--epochs", "0"]) == 0
    params, cfg = load_checkpoint(zero / "best.ckpt")
    init = state_dict(build_model(cli.ModelConfig(**cfg["model"])))
    assert params.keys() == init.keys()
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_train_beta_zero_matches_no_d2_every_epoch(tiny):
    tmp, ini = tiny
    common = ["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--seed", "3"]
    assert cli.main(common + ["--out", str(tmp / "a"), "--arch", "cat", "--beta", "0"]) == 0
    assert cli.main(common + ["--out", str(tmp / "b"), "--arch", "cat_no_d2"]) == 0
    for epoch in range(3):
        pa, _ = load_checkpoint(tmp / "a" / "epochs" / f"epoch_{epoch:03d}.ckpt")
        pb, _ = load_checkpoint(tmp / "b" / "epochs" / f"epoch_{epoch:03d}.ckpt")
        assert set(pb) == {k for k in pa if not k.startswith("D2")}
        for k in pb:
            assert np.array_equal(pa[k], pb[k]), (epoch, k)


def test_train_log_is_byte_deterministic(tiny):
    tmp, ini = tiny
    for name in ("r1", "r2"):
        assert cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(tmp / name),
                         "--arch", "cat"]) == 0
    assert (tmp / "r1" / "train_log.csv").read_bytes() == (tmp / "r2" / "train_log.csv").read_bytes()
    assert (tmp / "r1" / "best.ckpt").read_bytes() == (tmp / "r2" / "best.ckpt").read_bytes()


# ------------------------------------------------------------------- eval


def test_eval_output_and_determinism(tiny, capsys):
    tmp, ini = tiny
    cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(tmp / "run")])
    capsys.readouterr()
    args = ["eval", "--checkpoint", str(tmp / "run" / "best.ckpt"), "--corpus", str(tmp / "corpus"),
            "--topn", "1,2,3"]
    assert cli.main(args + ["--out", str(tmp / "e1")]) == 0
    first = capsys.readouterr().out
    assert cli.main(args + ["--out", str(tmp / "e2"), "--threads", "3"]) == 0
    assert capsys.readouterr().out == first
    assert [r["metric"] for r in read_csv(first)] == ["eer", "top1", "top2", "top3"]
    for name in ("metrics.csv", "scores.csv"):
        assert (tmp / "e1" / name).read_bytes() == (tmp / "e2" / name).read_bytes()
    scores = read_csv((tmp / "e1" / "scores.csv").read_text())
    assert len(scores) == 12 * 3


def test_eval_default_topn_and_dim_mismatch(tiny, capsys, tmp_path):
    tmp, ini = tiny
    cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(tmp / "run"),
              "--epochs", "0"])
    big = tmp_path / "big"
    save_corpus(synth_corpus(SynthCorpusConfig(n_train_speakers=12, n_dev_speakers=10, n_test_speakers=10,
                                               utts_per_channel=1, frames=12, feature_dim=8)), big)
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp / "run" / "best.ckpt"), "--corpus", str(big)]) == 0
    assert [r["metric"] for r in read_csv(capsys.readouterr().out)] == ["eer", "top1", "top5", "top10"]
    other = tmp_path / "f16"
    save_corpus(synth_corpus(SynthCorpusConfig(n_train_speakers=4, n_dev_speakers=2, n_test_speakers=2,
                                               utts_per_channel=1, frames=12, feature_dim=16)), other)
    assert cli.main(["eval", "--checkpoint", str(tmp / "run" / "best.ckpt"), "--corpus", str(other)]) == 2
    assert "feature dimension mismatch" in capsys.readouterr().err


def test_random_checkpoints_recall_at_chance(tmp_path, capsys):
    n_spk = 10
    corpus_dir = tmp_path / "c"
    save_corpus(synth_corpus(SynthCorpusConfig(n_train_speakers=4, n_dev_speakers=2, n_test_speakers=n_spk,
                                               utts_per_channel=3, frames=12, feature_dim=8,
                                               channel_mode="identity", template_scale=0.0)), corpus_dir)
    tops = []
    for seed in range(8):
        tcfg = TrainConfig(seed=seed, widths=[2] * 5, embed_dim=4, pool_stages=2, window=12)
        mcfg = tcfg.model_config(8, 4)
        save_checkpoint(state_dict(build_model(mcfg)), {"model": mcfg.to_dict()}, tmp_path / f"{seed}.ckpt")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / f"{seed}.ckpt"), "--corpus", str(corpus_dir),
                         "--metrics", "topn", "--topn", "1"]) == 0
        tops.append(float(read_csv(capsys.readouterr().out)[0]["value"]))
    n_tests = n_spk * 3
    sigma = math.sqrt((1 / n_spk) * (1 - 1 / n_spk) / (n_tests * len(tops)))
    assert abs(np.mean(tops) - 1 / n_spk) <= 3 * sigma


# ------------------------------------------------------------- sweep-beta


def test_sweep_counts_and_beta_zero_equivalence(tiny, capsys):
    tmp, ini = tiny
    out = tmp / "sweep"
    assert cli.main(["sweep-beta", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(out),
                     "--betas", "0,1", "--seeds", "0,1", "--epochs", "1"]) == 0
    cells = read_csv((out / "sweep_cells.csv").read_text())
    med = read_csv((out / "sweep_median.csv").read_text())
    assert len(cells) == 4 and len(med) == 2
    assert list(cells[0]) == ["beta", "seed", "dev_eer", "test_top1", "error"]

    # the beta=0 cell reproduces cat_no_d2 for the same seed
    run = tmp / "nod2"
    assert cli.main(["train", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out", str(run),
                     "--arch", "cat_no_d2", "--epochs", "1", "--seed", "1"]) == 0
    capsys.readouterr()
    cli.main(["eval", "--checkpoint", str(run / "best.ckpt"), "--corpus", str(tmp / "corpus"), "--topn", "1"])
    test_top1 = float(read_csv(capsys.readouterr().out)[1]["value"])
    cli.main(["eval", "--checkpoint", str(run / "best.ckpt"), "--corpus", str(tmp / "corpus"), "--topn", "1",
              "--partition", "dev"])
    dev_eer = float(read_csv(capsys.readouterr().out)[0]["value"])
    cell = next(r for r in cells if float(r["beta"]) == 0.0 and r["seed"] == "1")
    assert float(cell["dev_eer"]) == dev_eer and float(cell["test_top1"]) == test_top1


def test_sweep_failure_sets_exit_code(tiny):
    tmp, ini = tiny
    assert cli.main(["sweep-beta", "--config", str(ini), "--corpus", str(tmp / "corpus"), "--out",
                     str(tmp / "bad"), "--betas", "1", "--speakers_per_batch", "40"]) == 1
    assert "ValueError" in (tmp / "bad" / "sweep_cells.csv").read_text()
