"""Command-line entry point: synth, fbank, train, eval, sweep-beta.

Any option not listed in a subcommand's help is treated as a config
override, ``--key value`` or ``--section.key value``.  Exit status is 0
when every item succeeded, 1 when some per-item work failed, 2 on usage
or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, load_state, save_checkpoint, state_dict
from .config import ConfigError, RunConfig, load_run_config, parse_overrides
from .data import FeatureFileError, WavError, fbank, load_corpus, parse_wav, save_corpus, synth_corpus, write_features
from .evaluation import (
    DEFAULT_BETAS,
    beta_sweep,
    build_trials,
    topn_recall,
    trial_eer,
    trial_scores_csv,
    write_sweep,
)
from .model import ModelConfig, build_model
from .train import TrainingDiverged, train_loop

log = logging.getLogger("chanadv")

EXIT_OK, EXIT_ITEM_FAILURE, EXIT_USAGE = 0, 1, 2


def _run_config(args, extra) -> RunConfig:
    return load_run_config(args.config, parse_overrides(extra))


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ------------------------------------------------------------------ synth


def cmd_synth(args, extra) -> int:
    cfg = _run_config(args, extra)
    corpus = synth_corpus(cfg.corpus)
    manifests = save_corpus(corpus, args.out)
    for name, path in manifests.items():
        print(f"{name}: {len(corpus.partitions()[name])} utterances -> {path}")
    return EXIT_OK


# ------------------------------------------------------------------ fbank


def cmd_fbank(args, extra) -> int:
    cfg = _run_config(args, extra)
    src = Path(args.input)
    if src.is_dir():
        inputs = sorted(p for p in src.iterdir() if p.is_file())
    elif src.exists():
        inputs = [src]
    else:
        print(f"error: {src} does not exist", file=sys.stderr)
        return EXIT_USAGE
    if not inputs:
        log.warning("no input files in %s", src)
        print("0 files processed")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            samples, rate = parse_wav(path.read_bytes())
            feats = fbank(samples, rate, cfg.fbank)
            dest = out / (path.stem + ".catf")
            write_features(dest, feats)
            return path, feats.shape, None
        except (WavError, ValueError, OSError) as exc:
            return path, None, exc

    with ThreadPoolExecutor(max(1, cfg.eval.threads)) as pool:
        results = list(pool.map(one, inputs))
    failures = 0
    for path, shape, err in results:
        if err is None:
            print(f"{path.name}: {shape[0]} frames x {shape[1]} bins")
        else:
            failures += 1
            print(f"{path.name}: FAILED {type(err).__name__}: {err}", file=sys.stderr)
    print(f"{len(results) - failures} of {len(results)} files processed")
    return EXIT_ITEM_FAILURE if failures else EXIT_OK


# ------------------------------------------------------------------ train


def _checkpoint_config(model_cfg: ModelConfig, train_cfg, speakers) -> dict:
    return {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "train_speakers": [int(s) for s in speakers]}


def cmd_train(args, extra) -> int:
    cfg = _run_config(args, extra)
    tcfg = replace(cfg.train, arch=args.arch) if args.arch else cfg.train
    tcfg.validate()
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    (out / "epochs").mkdir(parents=True, exist_ok=True)
    speakers = corpus.train_speakers()
    model_cfg = tcfg.model_config(corpus.feature_dim, len(speakers))
    ckpt_cfg = _checkpoint_config(model_cfg, tcfg, speakers)
    save_checkpoint(state_dict(build_model(model_cfg)), ckpt_cfg, out / "epochs" / "epoch_000.ckpt")

    def on_epoch(epoch, model):
        save_checkpoint(state_dict(model), ckpt_cfg, out / "epochs" / f"epoch_{epoch:03d}.ckpt")

    try:
        model, tlog = train_loop(tcfg, corpus, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.best_state is not None:
            save_checkpoint(exc.best_state, ckpt_cfg, out / "best.ckpt")
        if exc.log is not None:
            (out / "train_log.csv").write_text(exc.log.csv())
            (out / "summary.json").write_text(exc.log.summary(tcfg))
        return EXIT_ITEM_FAILURE
    save_checkpoint(state_dict(model), ckpt_cfg, out / "best.ckpt")
    (out / "train_log.csv").write_text(tlog.csv())
    (out / "summary.json").write_text(tlog.summary(tcfg))
    best = json.loads(tlog.summary(tcfg))["best_dev_eer"]
    print(f"trained {tcfg.arch}: {len(tlog.steps)} steps, best dev EER {best}")
    print(f"checkpoint -> {out / 'best.ckpt'}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def model_from_checkpoint(path):
    params, ckpt_cfg = load_checkpoint(path)
    if "model" not in ckpt_cfg:
        raise CheckpointError(f"{path}: config block has no model section")
    model_cfg = ModelConfig(**ckpt_cfg["model"])
    model = build_model(model_cfg)
    load_state(model, params)
    return model, ckpt_cfg


def cmd_eval(args, extra) -> int:
    cfg = _run_config(args, extra)
    settings = cfg.eval
    model, ckpt_cfg = model_from_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if corpus.feature_dim != model.cfg.feature_dim:
        raise ValueError(
            f"feature dimension mismatch: checkpoint expects {model.cfg.feature_dim}, corpus has {corpus.feature_dim}"
        )
    unknown = set(settings.metrics) - {"eer", "topn"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from eer, topn")
    if settings.partition not in ("dev", "test"):
        raise ConfigError(f"partition must be dev or test, got {settings.partition!r}")
    window = int(ckpt_cfg.get("train", {}).get("window", cfg.train.window))
    trials = build_trials(corpus.partitions()[settings.partition], model, window, settings.threads)
    rows = []
    if "eer" in settings.metrics:
        rows.append(("eer", trial_eer(trials)))
    if "topn" in settings.metrics:
        for n in settings.topn:
            rows.append((f"top{n}", topn_recall(trials.scores, trials.truth, n)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name, value in rows:
        w.writerow([name, repr(float(value))])
    text = buf.getvalue()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(text)
        (out / "scores.csv").write_text(trial_scores_csv(trials))
    return EXIT_OK


# ------------------------------------------------------------- sweep-beta


def cmd_sweep_beta(args, extra) -> int:
    cfg = _run_config(args, extra)
    corpus = load_corpus(args.corpus)
    betas = _float_list(args.betas) if args.betas else list(DEFAULT_BETAS)
    seeds = _int_list(args.seeds) if args.seeds else [cfg.train.seed]

    def progress(row):
        status = row["error"] or f"dev EER {row['dev_eer']:.4f}, test Top1 {row['test_top1']:.4f}"
        print(f"beta={row['beta']:g} seed={row['seed']}: {status}", flush=True)

    rows = beta_sweep(cfg.train, corpus, betas, seeds, progress)
    cells, median = write_sweep(rows, args.out)
    print(f"cells -> {cells}\nmedians -> {median}")
    return EXIT_ITEM_FAILURE if any(r["error"] for r in rows) else EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chanadv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI config file")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate the synthetic two-channel corpus")
    sp.add_argument("--out", required=True, help="corpus directory to write")

    sp = add("fbank", cmd_fbank, "extract log mel filter-bank features from WAV files")
    sp.add_argument("input", help="a WAV file or a directory of them")
    sp.add_argument("--out", required=True, help="directory for .catf feature files")

    sp = add("train", cmd_train, "train a cnn, cat or cat_no_d2 model")
    sp.add_argument("--arch", choices=["cnn", "cat", "cat_no_d2"], help="architecture (default from config)")
    sp.add_argument("--corpus", required=True, help="corpus directory from `synth`")
    sp.add_argument("--out", required=True, help="run directory to write")

    sp = add("eval", cmd_eval, "score cross-channel trials; report EER and TopN recall")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", help="directory for metrics.csv and scores.csv")

    sp = add("sweep-beta", cmd_sweep_beta, "train CAT over a grid of beta values and seeds")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--betas", help="comma-separated grid (default 0,0.25,0.5,1,2,4)")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, CheckpointError, FeatureFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
