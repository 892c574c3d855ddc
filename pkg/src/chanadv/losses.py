"""Training objectives: speaker softmax, cosine triplet, and channel cross-entropy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, mul, record, relu, scale, sub, sum_, take

__all__ = [
    "TripletBatch",
    "softmax_loss",
    "cosine_similarity",
    "triplet_loss",
    "combined_loss",
    "channel_adversarial_loss",
    "channel_onehot",
    "select_triplets",
]


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    margin: float = 0.1
    warning: str | None = field(default=None)

    def __len__(self) -> int:
        return len(self.anchor)

    @classmethod
    def empty(cls, margin: float, reason: str) -> "TripletBatch":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z.copy(), z.copy(), margin, reason)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    total = sum_(per_sample)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return scale(total, 1.0 / max(per_sample.size, 1))
    raise ValueError(f"unknown reduction {reduction!r}")


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    z = logits.data
    m = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    nll = lse - shifted[rows, labels]

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return record(nll, (logits,), vjp)


def softmax_loss(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of the true speaker under a softmax over logits."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if logits.shape[0] < 1:
        raise ValueError("softmax_loss needs at least one sample")
    n = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range [0, {n})")
    return _reduce(_cross_entropy(logits, labels), reduction)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb))


def triplet_loss(embeddings: Tensor, triplets: TripletBatch, reduction: str = "sum") -> Tensor:
    """Sum of max(0, cos(a, n) + margin - cos(a, p)) over triplets.

    Embeddings are assumed unit-norm, so the cosine is a row dot product.
    An empty batch yields an exact zero constant.
    """
    if len(triplets) == 0:
        warnings.warn(triplets.warning or "empty triplet batch", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    a = take(embeddings, triplets.anchor)
    p = take(embeddings, triplets.positive)
    n = take(embeddings, triplets.negative)
    sim_an = sum_(mul(a, n), axis=1)
    sim_ap = sum_(mul(a, p), axis=1)
    margin = Tensor(np.full(len(triplets), triplets.margin))
    hinge = relu(sub(add(sim_an, margin), sim_ap))
    return _reduce(hinge, reduction)


def combined_loss(softmax_term: Tensor, triplet_term: Tensor, alpha: float = 1.0) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return add(softmax_term, scale(triplet_term, alpha))


def channel_onehot(channel_ids) -> np.ndarray:
    """Channel 0 -> [1, 0], channel 1 -> [0, 1]."""
    ids = np.asarray(channel_ids, dtype=np.intp)
    if np.any((ids != 0) & (ids != 1)):
        raise ValueError("channel ids must be 0 or 1")
    return np.eye(2)[ids]


def channel_adversarial_loss(channel_logits: Tensor, channel_labels, reduction: str = "sum") -> Tensor:
    """Two-class cross-entropy of the channel discriminator.

    The adversarial effect comes from where the logits were computed: behind
    a gradient reversal layer, the feature extractor receives the negated
    (and beta-scaled) gradient of this loss.
    """
    labels = np.asarray(channel_labels, dtype=np.float64)
    if channel_logits.ndim != 2 or channel_logits.shape[1] != 2:
        raise ValueError(f"channel logits must be [M,2], got {channel_logits.shape}")
    if labels.shape != channel_logits.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {channel_logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("channel labels must be one-hot pairs")
    return _reduce(_cross_entropy(channel_logits, labels.argmax(axis=1)), reduction)


def select_triplets(embeddings, speaker_labels, delta: float = 0.1) -> TripletBatch:
    """Every ordered same-speaker pair, paired with its hardest in-batch negative.

    The negative for anchor a is the different-speaker row with the highest
    cosine similarity to a (first index on ties).
    """
    e = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(speaker_labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    if not pos.any():
        reason = "no speaker has two utterances in the batch"
        warnings.warn(reason, RuntimeWarning, stacklevel=2)
        return TripletBatch.empty(delta, reason)
    if same.all():
        reason = "batch holds a single speaker; no negatives"
        warnings.warn(reason, RuntimeWarning, stacklevel=2)
        return TripletBatch.empty(delta, reason)
    norms = np.linalg.norm(e, axis=1)
    sims = (e @ e.T) / np.outer(norms, norms)
    hardest = np.where(same, -np.inf, sims).argmax(axis=1)
    anchor, positive = np.nonzero(pos)
    return TripletBatch(anchor, positive, hardest[anchor], delta)
