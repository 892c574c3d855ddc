"""Cross-channel trials, cosine scoring, EER, TopN recall and the beta sweep."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, relu
from .data import UtteranceFeatures
from .layers import LinearLayer, linear
from .losses import softmax_loss
from .model import embed_utterances

__all__ = [
    "TrialList",
    "score_trials",
    "compute_eer",
    "topn_recall",
    "build_trials",
    "trial_eer",
    "trial_scores_csv",
    "beta_sweep",
    "sweep_csvs",
    "DEFAULT_BETAS",
    "channel_probe",
]

DEFAULT_BETAS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class TrialList:
    speaker_ids: np.ndarray  # [S] enrolled speakers
    enrolled: np.ndarray  # [S, d] unit rows
    test_ids: list[str]  # [U] test utterance ids
    tests: np.ndarray  # [U, d] unit rows
    scores: np.ndarray  # [U, S]
    truth: np.ndarray  # [U] index into speaker_ids

    def target_scores(self) -> np.ndarray:
        return self.scores[np.arange(len(self.truth)), self.truth]

    def impostor_scores(self) -> np.ndarray:
        mask = np.ones(self.scores.shape, dtype=bool)
        mask[np.arange(len(self.truth)), self.truth] = False
        return self.scores[mask]


def score_trials(enrolled, tests, tol: float = 1e-3) -> np.ndarray:
    """Cosine scores [tests x enrolled]; inputs must already be unit-norm."""
    enrolled = np.atleast_2d(np.asarray(enrolled, dtype=np.float64))
    tests = np.atleast_2d(np.asarray(tests, dtype=np.float64))
    for name, e in (("enrolled", enrolled), ("test", tests)):
        dev = np.abs(np.linalg.norm(e, axis=1) - 1.0)
        if dev.size and dev.max() > tol:
            raise ValueError(f"{name} embeddings are not unit-norm (max deviation {dev.max():.3g})")
    return np.clip(tests @ enrolled.T, -1.0, 1.0)


def compute_eer(target_scores, impostor_scores) -> float:
    """Equal error rate by threshold sweep over the pooled scores.

    At threshold t, FRR is the fraction of targets below t and FAR the
    fraction of impostors at or above t.  The threshold with the smallest
    |FAR - FRR| (lowest such threshold on ties) gives (FAR + FRR) / 2.
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64).ravel())
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if tgt.size == 0 or imp.size == 0:
        raise ValueError("EER needs non-empty target and impostor score lists")
    thresholds = np.unique(np.concatenate([tgt, imp]))
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    best = int(np.argmin(np.abs(far - frr)))
    return float((far[best] + frr[best]) / 2)


def topn_recall(scores, truth, n: int) -> float:
    """Fraction of tests whose true speaker ranks within the top n.

    Ties go to the lower speaker index.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.intp)
    n_spk = scores.shape[1]
    if not 1 <= n <= n_spk:
        raise ValueError(f"N must lie in [1, {n_spk}], got {n}")
    true_score = scores[np.arange(len(truth)), truth][:, None]
    idx = np.arange(n_spk)[None, :]
    ahead = (scores > true_score) | ((scores == true_score) & (idx < truth[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < n))


def build_trials(utterances: list[UtteranceFeatures], model, window: int = 500, threads: int = 1) -> TrialList:
    """Enrol every speaker from its channel-A utterances, test on channel B.

    A speaker's enrolled embedding is the normalized mean of its enrolment
    utterance embeddings; every test utterance is scored against every
    enrolled speaker.
    """
    enrol = [u for u in utterances if u.channel_id == 0]
    tests = [u for u in utterances if u.channel_id == 1]
    speakers = np.array(sorted({u.speaker_id for u in utterances}))
    if not tests:
        raise ValueError("no channel-B test utterances")
    emb = embed_utterances(enrol + tests, model, window, threads)
    enrol_emb, test_emb = emb[: len(enrol)], emb[len(enrol):]
    spk_index = {int(s): i for i, s in enumerate(speakers)}
    sums = np.zeros((len(speakers), emb.shape[1]))
    counts = np.zeros(len(speakers))
    for u, e in zip(enrol, enrol_emb):
        sums[spk_index[u.speaker_id]] += e
        counts[spk_index[u.speaker_id]] += 1
    if np.any(counts == 0):
        missing = speakers[counts == 0].tolist()
        raise ValueError(f"speakers without enrolment utterances: {missing}")
    enrolled = sums / np.linalg.norm(sums, axis=1, keepdims=True)
    truth = np.array([spk_index[u.speaker_id] for u in tests], dtype=np.intp)
    return TrialList(
        speakers, enrolled, [u.utterance_id for u in tests], test_emb, score_trials(enrolled, test_emb), truth
    )


def trial_eer(trials: TrialList) -> float:
    return compute_eer(trials.target_scores(), trials.impostor_scores())


def trial_scores_csv(trials: TrialList) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["test_utterance_id", "speaker_id", "score", "is_target"])
    for u, uid in enumerate(trials.test_ids):
        for s, spk in enumerate(trials.speaker_ids):
            w.writerow([uid, int(spk), repr(float(trials.scores[u, s])), int(trials.truth[u] == s)])
    return buf.getvalue()


def channel_probe(train_x, train_y, test_x, test_y, hidden: int = 32, steps: int = 500, lr: float = 0.5,
                  seed: int = 0) -> float:
    """Test accuracy of a two-layer channel classifier fit on frozen embeddings.

    Inputs are standardized with the training statistics; the classifier is
    linear -> relu -> linear, trained by full-batch gradient descent on the
    mean cross-entropy.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.intp)
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0) + 1e-8
    xtr, xte = Tensor((train_x - mu) / sd), Tensor((test_x - mu) / sd)
    rng = np.random.default_rng(seed)
    l1, l2 = LinearLayer(train_x.shape[1], hidden, rng), LinearLayer(hidden, 2, rng)
    params = [l1.weight, l1.bias, l2.weight, l2.bias]

    def logits(x):
        return linear(relu(linear(x, l1.weight, l1.bias)), l2.weight, l2.bias)

    for _ in range(steps):
        with Tape() as tape:
            loss = softmax_loss(logits(xtr), train_y, "mean")
        tape.backward(loss)
        for p in params:
            p.data = p.data - lr * tape.grad(p)
    pred = logits(xte).data.argmax(axis=1)
    return float(np.mean(pred == np.asarray(test_y)))


def beta_sweep(base_config, corpus, betas=DEFAULT_BETAS, seeds=(0,), progress=None) -> list[dict]:
    """Train one CAT model per (beta, seed); report dev EER and test Top1.

    A failing cell is recorded with its error and the sweep moves on.
    """
    from .train import train_loop

    if not betas or not seeds:
        raise ValueError("need at least one beta and one seed")
    rows = []
    for beta in betas:
        for seed in seeds:
            cfg = replace(base_config, arch="cat", beta=float(beta), seed=int(seed))
            row = {"beta": float(beta), "seed": int(seed), "dev_eer": None, "test_top1": None, "error": ""}
            try:
                model, _ = train_loop(cfg, corpus)
                row["dev_eer"] = trial_eer(build_trials(corpus.dev, model, cfg.window))
                test = build_trials(corpus.test, model, cfg.window)
                row["test_top1"] = topn_recall(test.scores, test.truth, 1)
            except Exception as exc:  # noqa: BLE001 - a cell failure must not end the sweep
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if progress:
                progress(row)
    return rows


def _median(vals):
    vals = [v for v in vals if v is not None]
    return statistics.median(vals) if vals else None


def sweep_csvs(rows: list[dict]) -> tuple[str, str]:
    """Per-cell CSV and per-beta median CSV."""
    def fmt(v):
        return "" if v is None else repr(float(v))

    cells = io.StringIO()
    w = csv.writer(cells, lineterminator="\n")
    w.writerow(["beta", "seed", "dev_eer", "test_top1", "error"])
    for r in rows:
        w.writerow([fmt(r["beta"]), r["seed"], fmt(r["dev_eer"]), fmt(r["test_top1"]), r.get("error", "")])
    med = io.StringIO()
    w = csv.writer(med, lineterminator="\n")
    w.writerow(["beta", "n_seeds", "dev_eer", "test_top1"])
    for beta in dict.fromkeys(r["beta"] for r in rows):
        group = [r for r in rows if r["beta"] == beta]
        ok = [r for r in group if not r.get("error")]
        w.writerow([
            fmt(beta), len(ok), fmt(_median([r["dev_eer"] for r in ok])), fmt(_median([r["test_top1"] for r in ok]))
        ])
    return cells.getvalue(), med.getvalue()


def write_sweep(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells, med = sweep_csvs(rows)
    p1, p2 = out / "sweep_cells.csv", out / "sweep_median.csv"
    p1.write_text(cells)
    p2.write_text(med)
    return p1, p2
