"""Baseline convolutional embedder and the channel-adversarial (CAT) model.

CAT = G (two stacked LSTMs over frames, hidden size = feature dim) feeding
D1 (the baseline CNN, speaker embedding + softmax head), plus D2, a small
channel classifier on the temporal mean of G's output behind a gradient
reversal layer.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .autodiff import ShapeError, Tensor, l2_normalize, mean, relu, reshape

__all__ = [
    "ModelConfig",
    "BaselineCnn",
    "CatModel",
    "build_model",
    "baseline_forward",
    "cat_forward",
    "segment_indices",
    "utterance_embedding",
    "embed_utterances",
]

ARCHITECTURES = ("cnn", "cat", "cat_no_d2")


@dataclass
class ModelConfig:
    arch: str = "cnn"
    feature_dim: int = 16
    n_speakers: int = 250
    widths: list[int] = field(default_factory=lambda: [16, 16, 32, 32, 64])
    embed_dim: int = 128
    pool_stages: int = 5
    dropout: float = 0.2
    d2_hidden: int = 64
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if len(self.widths) != 5:
            raise ValueError(f"the conv stack has exactly five blocks, got {len(self.widths)} widths")
        if not 0 <= self.pool_stages <= 5:
            raise ValueError("pool_stages must lie in [0, 5]")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# independent init streams so that dropping D2 never shifts G/D1 initialisation
_STREAM_G, _STREAM_D1, _STREAM_D2 = 101, 102, 103


class BaselineCnn:
    """Five conv(3x3)+batchnorm+relu blocks; the first ``pool_stages`` blocks
    are followed by 2x2 max pooling.  Global average pooling and a linear
    projection give the embedding; a linear softmax head scores speakers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = [1] + list(cfg.widths)
        self.convs = [L.Conv2dLayer(chans[i], chans[i + 1], rng) for i in range(5)]
        self.bns = [L.BatchNormLayer(chans[i + 1], cfg.bn_momentum, cfg.bn_eps) for i in range(5)]
        self.proj = L.LinearLayer(chans[-1], cfg.embed_dim, rng)
        self.head = L.LinearLayer(cfg.embed_dim, cfg.n_speakers, rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.update({f"conv{i}.{k}": v for k, v in conv.params().items()})
            out.update({f"bn{i}.{k}": v for k, v in bn.params().items()})
        out.update({f"proj.{k}": v for k, v in self.proj.params().items()})
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"bn{i}.{k}": v for i, bn in enumerate(self.bns) for k, v in bn.buffers().items()}

    def check_input(self, t_len: int, f_dim: int) -> None:
        p = self.cfg.pool_stages
        if (t_len >> p) < 1 or (f_dim >> p) < 1:
            raise ShapeError(
                f"input ({t_len}, {f_dim}) does not survive {p} 2x2 poolings; need both >= {1 << p}"
            )

    def embed_raw(self, x: Tensor, mode: str) -> Tensor:
        """[M,1,T,F] -> unnormalized projection [M,d]."""
        self.check_input(x.shape[2], x.shape[3])
        h = x
        for i in range(5):
            h = relu(L.batchnorm(L.conv2d(h, self.convs[i]), self.bns[i], mode))
            if i < self.cfg.pool_stages:
                h = L.pool2d(h, "max")
        pooled = L.global_average_pool(h)
        return L.linear(pooled, self.proj.weight, self.proj.bias)

    def forward(self, x: Tensor, mode: str, rng: np.random.Generator | None = None):
        raw = self.embed_raw(x, mode)
        dropped = L.dropout(raw, self.cfg.dropout, mode, rng)
        logits = L.linear(dropped, self.head.weight, self.head.bias)
        return l2_normalize(raw), logits


class CatModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        f = cfg.feature_dim
        g_rng = _rng(cfg.seed, _STREAM_G)
        self.lstms = [L.LstmLayer(f, f, g_rng), L.LstmLayer(f, f, g_rng)]
        self.d1 = BaselineCnn(cfg, _rng(cfg.seed, _STREAM_D1))
        self.d2: list[L.LinearLayer] | None = None
        if cfg.arch == "cat":
            d2_rng = _rng(cfg.seed, _STREAM_D2)
            self.d2 = [L.LinearLayer(f, cfg.d2_hidden, d2_rng), L.LinearLayer(cfg.d2_hidden, 2, d2_rng)]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, lstm in enumerate(self.lstms):
            out.update({f"G.lstm{i}.{k}": v for k, v in lstm.params().items()})
        out.update({f"D1.{k}": v for k, v in self.d1.named_params().items()})
        for i, fc in enumerate(self.d2 or []):
            out.update({f"D2.fc{i}.{k}": v for k, v in fc.params().items()})
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"D1.{k}": v for k, v in self.d1.named_buffers().items()}

    def generator(self, x: Tensor) -> Tensor:
        """[M,1,T,F] -> G output [M,T,F]."""
        m, _, t_len, f = x.shape
        h = reshape(x, (m, t_len, f))
        for lstm in self.lstms:
            h = L.lstm_batch(h, lstm)
        return h

    def embed_raw(self, x: Tensor, mode: str) -> Tensor:
        g = self.generator(x)
        return self.d1.embed_raw(reshape(g, x.shape), mode)

    def forward(self, x: Tensor, beta: float, mode: str, rng_d1=None, rng_d2=None):
        m, _, t_len, f = x.shape
        self.d1.check_input(t_len, f)
        g = self.generator(x)
        emb, logits = self.d1.forward(reshape(g, x.shape), mode, rng_d1)
        if self.d2 is None:
            return emb, logits, None
        summary = mean(g, axis=1)  # temporal mean, [M,F]
        h = L.gradient_reversal(summary, beta)
        h = L.dropout(h, self.cfg.dropout, mode, rng_d2)
        h = relu(L.linear(h, self.d2[0].weight, self.d2[0].bias))
        channel_logits = L.linear(h, self.d2[1].weight, self.d2[1].bias)
        return emb, logits, channel_logits


class CnnModel:
    """Wrapper giving the baseline the same naming/IO surface as CatModel."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.d1 = BaselineCnn(cfg, _rng(cfg.seed, _STREAM_D1))

    def named_params(self) -> dict[str, Tensor]:
        return {f"D1.{k}": v for k, v in self.d1.named_params().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"D1.{k}": v for k, v in self.d1.named_buffers().items()}

    def embed_raw(self, x: Tensor, mode: str) -> Tensor:
        return self.d1.embed_raw(x, mode)

    def forward(self, x: Tensor, mode: str, rng_d1=None):
        return self.d1.forward(x, mode, rng_d1)


def build_model(cfg: ModelConfig):
    cfg.validate()
    return CnnModel(cfg) if cfg.arch == "cnn" else CatModel(cfg)


def _batch_tensor(batch) -> Tensor:
    feats = batch.features if hasattr(batch, "features") else batch
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 4 or feats.shape[1] != 1:
        raise ShapeError(f"batch features must be [M,1,T,F], got {feats.shape}")
    return Tensor(feats)


def baseline_forward(batch, model: CnnModel, mode: str = "train", rng=None):
    """Returns (unit-norm embeddings [M,d], speaker logits [M,N])."""
    return model.forward(_batch_tensor(batch), mode, rng)


def cat_forward(batch, model: CatModel, beta: float = 1.0, mode: str = "train", rng_d1=None, rng_d2=None):
    """Returns (embeddings, speaker logits, channel logits or None without D2)."""
    return model.forward(_batch_tensor(batch), beta, mode, rng_d1, rng_d2)


# ------------------------------------------------------------ recognition


def segment_indices(t_len: int, window: int) -> list[np.ndarray]:
    """Frame indices of each non-overlapping window; short pieces wrap around."""
    if t_len < 1 or window < 1:
        raise ValueError("need t_len >= 1 and window >= 1")
    n_seg = max(1, -(-t_len // window))
    segs = []
    for k in range(n_seg):
        start = k * window
        length = min(window, t_len - start)
        segs.append(start + np.arange(window) % length)
    return segs


def _embed_segments(model, segments: np.ndarray, chunk: int = 256, threads: int = 1) -> np.ndarray:
    def run(i):
        raw = model.embed_raw(Tensor(segments[i:i + chunk][:, None]), "infer").data
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)

    starts = range(0, len(segments), chunk)
    if threads > 1:
        # chunks are independent and reassembled in order, so output is identical
        with ThreadPoolExecutor(threads) as pool:
            return np.concatenate(list(pool.map(run, starts)), axis=0)
    return np.concatenate([run(i) for i in starts], axis=0)


def utterance_embedding(features, model, window: int = 500) -> np.ndarray:
    """Average of per-segment unit embeddings, re-normalized to unit length."""
    return embed_utterances([features], model, window)[0]


def embed_utterances(feature_list, model, window: int = 500, threads: int = 1) -> np.ndarray:
    """Embed many utterances, batching all their segments together."""
    segments, owner = [], []
    for u, feats in enumerate(feature_list):
        feats = np.asarray(getattr(feats, "features", feats), dtype=np.float64)
        for idx in segment_indices(feats.shape[0], window):
            segments.append(feats[idx])
            owner.append(u)
    seg_emb = _embed_segments(model, np.stack(segments), threads=threads)
    owner = np.asarray(owner)
    sums = np.zeros((len(feature_list), seg_emb.shape[1]))
    np.add.at(sums, owner, seg_emb)
    means = sums / np.bincount(owner, minlength=len(feature_list))[:, None]
    return means / np.linalg.norm(means, axis=1, keepdims=True)
