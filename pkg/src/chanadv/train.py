"""SGD training for the baseline CNN and the CAT variants."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, add
from .checkpoint import load_state, state_dict
from .data import Corpus, make_batches
from .evaluation import build_trials, trial_eer
from .losses import (
    channel_adversarial_loss,
    channel_onehot,
    combined_loss,
    select_triplets,
    softmax_loss,
    triplet_loss,
)
from .model import ModelConfig, build_model

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "NonFiniteGradient",
    "sgd_step",
    "lr_schedule_update",
    "train_loop",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Non-finite loss. ``best_state`` holds the last good checkpoint."""

    def __init__(self, msg, best_state=None, log=None):
        super().__init__(msg)
        self.best_state = best_state
        self.log = log


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    Defaults form the desk preset: 50-frame windows over 16 bins with three
    pooling stages.  Full-size inputs use ``window=500, pool_stages=5``.
    """

    arch: str = "cnn"
    lr: float = 0.2
    lr_decay: float = 0.5
    patience: int = 2
    lr_floor: float = 1e-4
    epochs: int = 30
    speakers_per_batch: int = 16
    utts_per_speaker: int = 4
    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 0.1
    reduction: str = "mean"
    seed: int = 0
    eval_interval: int = 1
    window: int = 50
    widths: list[int] = field(default_factory=lambda: [16, 16, 32, 32, 64])
    embed_dim: int = 128
    pool_stages: int = 3
    dropout: float = 0.2
    d2_hidden: int = 64

    def validate(self) -> None:
        if min(self.lr, self.lr_decay, self.lr_floor) <= 0:
            raise ValueError("learning-rate settings must be positive")
        if self.patience < 1 or self.eval_interval < 1:
            raise ValueError("patience and eval_interval must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.utts_per_speaker < 2:
            raise ValueError("utts_per_speaker must be >= 2 so every batch has triplets")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    def model_config(self, feature_dim: int, n_speakers: int) -> ModelConfig:
        return ModelConfig(
            arch=self.arch,
            feature_dim=feature_dim,
            n_speakers=n_speakers,
            widths=list(self.widths),
            embed_dim=self.embed_dim,
            pool_stages=self.pool_stages,
            dropout=self.dropout,
            d2_hidden=self.d2_hidden,
            seed=self.seed,
        )


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "L_s", "L_T", "L_ch", "total", "lr"])
        for s in self.steps:
            w.writerow([s["step"]] + [repr(s[k]) for k in ("L_s", "L_T", "L_ch", "total", "lr")])
        return buf.getvalue()

    def summary(self, config: TrainConfig) -> str:
        best = min(self.evals, key=lambda e: e["dev_eer"]) if self.evals else None
        doc = {
            "config": asdict(config),
            "steps": len(self.steps),
            "evals": self.evals,
            "lr_events": self.events,
            "best_dev_eer": best["dev_eer"] if best else None,
            "best_epoch": best["epoch"] if best else None,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> dict[str, Tensor]:
    """theta <- theta - lr * g, in place. Non-finite gradients abort the step untouched."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
    for name, p in params.items():
        p.data = p.data - lr * grads[name]
    return params


def lr_schedule_update(history: list[float], lr: float, cfg: TrainConfig) -> float:
    """Halve (by ``lr_decay``) after every ``patience`` evaluations without a new best.

    Only strict improvements over the best-so-far reset the count.
    """
    if not history:
        raise ValueError("empty dev history")
    best, stale = math.inf, 0
    for eer in history:
        if eer < best:
            best, stale = eer, 0
        else:
            stale += 1
    if stale and stale % cfg.patience == 0:
        return max(lr * cfg.lr_decay, cfg.lr_floor)
    return lr


def _step_losses(model, batch, cfg: TrainConfig, rng_d1, rng_d2):
    x = Tensor(batch.features)
    if cfg.arch == "cnn":
        emb, logits = model.forward(x, "train", rng_d1)
        ch_logits = None
    else:
        emb, logits, ch_logits = model.forward(x, cfg.beta, "train", rng_d1, rng_d2)
    ls = softmax_loss(logits, batch.speakers, cfg.reduction)
    lt = triplet_loss(emb, select_triplets(emb, batch.speakers, cfg.delta), cfg.reduction)
    total = combined_loss(ls, lt, cfg.alpha)
    lch = None
    if ch_logits is not None:
        lch = channel_adversarial_loss(ch_logits, channel_onehot(batch.channels), cfg.reduction)
        total = add(total, lch)
    return ls, lt, lch, total


def train_loop(cfg: TrainConfig, corpus: Corpus, on_epoch=None, on_step=None):
    """Train on ``corpus.train``; evaluate dev EER every ``eval_interval`` epochs.

    Returns ``(model, log)`` with the best-dev parameters loaded (the initial
    parameters when no evaluation ran).  ``on_epoch(epoch, model)`` is called
    after every epoch with the current (not best) parameters, and
    ``on_step(step, model)`` after every parameter update.
    """
    cfg.validate()
    speakers = corpus.train_speakers()
    label_of = {s: i for i, s in enumerate(speakers)}
    model = build_model(cfg.model_config(corpus.feature_dim, len(speakers)))
    params = model.named_params()
    # separate streams: D2's dropout must not perturb anything on the G/D1 side
    rng_batches = np.random.default_rng([cfg.seed, 201])
    rng_d1 = np.random.default_rng([cfg.seed, 202])
    rng_d2 = np.random.default_rng([cfg.seed, 203])
    tlog = TrainLog()
    best_state = state_dict(model)
    best_eer = math.inf
    lr = cfg.lr
    step = 0
    history: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(corpus.train, cfg.speakers_per_batch, cfg.utts_per_speaker, rng_batches, label_of)
        for batch in batches:
            with Tape() as tape:
                ls, lt, lch, total = _step_losses(model, batch, cfg, rng_d1, rng_d2)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", best_state, tlog)
            tape.backward(total)
            try:
                sgd_step(params, {k: tape.grad(p) for k, p in params.items()}, lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"step {step} (epoch {epoch}): {exc}", best_state, tlog) from exc
            tlog.steps.append({
                "step": step,
                "epoch": epoch,
                "L_s": ls.item(),
                "L_T": lt.item(),
                "L_ch": lch.item() if lch is not None else 0.0,
                "total": total.item(),
                "lr": lr,
            })
            if on_step is not None:
                on_step(step, model)
            step += 1
        if epoch % cfg.eval_interval == 0:
            eer = trial_eer(build_trials(corpus.dev, model, cfg.window))
            history.append(eer)
            tlog.evals.append({"epoch": epoch, "dev_eer": eer, "lr": lr})
            log.info("epoch %d dev EER %.4f lr %.4g", epoch, eer, lr)
            if eer < best_eer:
                best_eer = eer
                best_state = state_dict(model)
            new_lr = lr_schedule_update(history, lr, cfg)
            if new_lr != lr:
                tlog.events.append({"epoch": epoch, "old_lr": lr, "new_lr": new_lr})
                lr = new_lr
        if on_epoch is not None:
            on_epoch(epoch, model)
    load_state(model, best_state)
    return model, tlog
