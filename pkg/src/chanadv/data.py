"""Corpus handling: WAV input, log mel filter-bank features, the synthetic
two-channel corpus, on-disk formats and P x K batch assembly."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "WavError",
    "WavMagicError",
    "WavFormatError",
    "WavChannelError",
    "WavTruncatedError",
    "FeatureFileError",
    "UtteranceFeatures",
    "SynthCorpusConfig",
    "Corpus",
    "Batch",
    "parse_wav",
    "write_wav",
    "FbankConfig",
    "mel_filterbank",
    "fbank",
    "frame_count",
    "channel_transforms",
    "synth_corpus",
    "make_batches",
    "write_features",
    "read_features",
    "save_corpus",
    "load_corpus",
    "read_manifest",
]


class WavError(ValueError):
    pass


class WavMagicError(WavError):
    pass


class WavFormatError(WavError):
    pass


class WavChannelError(WavError):
    pass


class WavTruncatedError(WavError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass
class UtteranceFeatures:
    features: np.ndarray  # [T, F] log filter-bank energies
    speaker_id: int
    channel_id: int
    utterance_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.utterance_id}: features must be [T>=1, F], got {self.features.shape}")
        if self.channel_id not in (0, 1):
            raise ValueError(f"{self.utterance_id}: channel_id must be 0 or 1")


# --------------------------------------------------------------------- WAV


def parse_wav(data: bytes) -> tuple[np.ndarray, int]:
    """Decode a RIFF/WAVE PCM 16-bit mono file into samples in [-1, 1)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavMagicError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = pos + 8
        if chunk_id == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise WavTruncatedError("fmt chunk truncated")
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body)
            if audio_format != 1 or bits != 16:
                raise WavFormatError(f"only 16-bit PCM is supported (format {audio_format}, {bits} bits)")
            if channels != 1:
                raise WavChannelError(f"expected mono audio, got {channels} channels")
            fmt = rate
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk")
            if body + size > len(data) or size % 2:
                raise WavTruncatedError(f"data chunk declares {size} bytes, {len(data) - body} present")
            pcm = np.frombuffer(data, dtype="<i2", count=size // 2, offset=body)
            return pcm.astype(np.float64) / 32768.0, fmt
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavFormatError("no fmt chunk")
    raise WavTruncatedError("no data chunk")


def write_wav(samples, sample_rate: int) -> bytes:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm


# ------------------------------------------------------------------ fbank


@dataclass
class FbankConfig:
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    mel_bins: int = 64
    floor: float = 1e-10
    preemphasis: float = 0.97
    fft_size: int | None = None  # next power of two above the frame length


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters on the mel scale spanning 0 Hz to Nyquist.

    Returns (weights [n_mels, fft_size//2+1], centre frequencies in Hz).
    """
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)), edges[1:-1]


def frame_count(n_samples: int, sample_rate: int, cfg: FbankConfig) -> int:
    flen = int(round(sample_rate * cfg.frame_len_ms / 1000.0))
    shift = int(round(sample_rate * cfg.frame_shift_ms / 1000.0))
    return 0 if n_samples < flen else 1 + (n_samples - flen) // shift


def fbank(samples, sample_rate: int, cfg: FbankConfig | None = None) -> np.ndarray:
    """Log mel filter-bank energies, one row per frame."""
    cfg = cfg or FbankConfig()
    x = np.asarray(samples, dtype=np.float64)
    flen = int(round(sample_rate * cfg.frame_len_ms / 1000.0))
    shift = int(round(sample_rate * cfg.frame_shift_ms / 1000.0))
    n_frames = frame_count(len(x), sample_rate, cfg)
    if n_frames < 1:
        raise ValueError(f"signal of {len(x)} samples is shorter than one {flen}-sample frame")
    nfft = cfg.fft_size or 1 << (flen - 1).bit_length()
    idx = np.arange(flen)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = x[idx]
    prev = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
    frames = frames - cfg.preemphasis * prev
    frames = frames * np.hamming(flen)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    weights, _ = mel_filterbank(cfg.mel_bins, nfft, sample_rate)
    return np.log(np.maximum(power @ weights.T, cfg.floor))


# -------------------------------------------------------- synthetic corpus


@dataclass
class SynthCorpusConfig:
    """Desk-scale stand-in for a two-codec speaker corpus.

    Each utterance frame is ``gain_c * (template_s + wander) + offset_c + noise``.
    ``train_channels='split'`` records half the training speakers only on
    channel A and the other half only on channel B, so no training speaker
    is ever heard on both channels.
    """

    n_train_speakers: int = 250
    n_dev_speakers: int = 25
    n_test_speakers: int = 25
    utts_per_channel: int = 8
    frames: int = 50
    feature_dim: int = 16
    template_scale: float = 1.0
    wander_sigma: float = 0.5
    noise_sigma: float = 0.1
    gain_spread: float = 2.0
    offset_scale: float = 2.0
    channel_mode: str = "affine"
    train_channels: str = "split"
    channel_seed: int = 7
    seed: int = 0

    def validate(self) -> None:
        if self.n_train_speakers < 2:
            raise ValueError("need at least 2 training speakers")
        if self.n_dev_speakers < 2 or self.n_test_speakers < 2:
            raise ValueError("dev and test partitions need at least 2 speakers each")
        if self.noise_sigma < 0 or self.wander_sigma < 0:
            raise ValueError("noise and wander sigmas must be non-negative")
        if self.utts_per_channel < 1 or self.frames < 1 or self.feature_dim < 1:
            raise ValueError("utterance counts and dimensions must be positive")
        if self.gain_spread < 1:
            raise ValueError("gain_spread must be >= 1")
        if self.channel_mode not in ("affine", "identity"):
            raise ValueError(f"unknown channel_mode {self.channel_mode!r}")
        if self.train_channels not in ("split", "both"):
            raise ValueError(f"unknown train_channels {self.train_channels!r}")


@dataclass
class Corpus:
    train: list[UtteranceFeatures]
    dev: list[UtteranceFeatures]
    test: list[UtteranceFeatures]
    config: dict = field(default_factory=dict)

    def partitions(self) -> dict[str, list[UtteranceFeatures]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    @property
    def feature_dim(self) -> int:
        return self.train[0].features.shape[1]

    def train_speakers(self) -> list[int]:
        return sorted({u.speaker_id for u in self.train})


def channel_transforms(cfg: SynthCorpusConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel diagonal gains and offsets, shape [2, F] each.

    Log-gains are rescaled so each channel's max/min gain ratio equals
    ``gain_spread`` exactly.
    """
    f = cfg.feature_dim
    if cfg.channel_mode == "identity":
        return np.ones((2, f)), np.zeros((2, f))
    gains, offsets = np.empty((2, f)), np.empty((2, f))
    for c in range(2):
        rng = np.random.default_rng([cfg.channel_seed, c])
        u = rng.uniform(-1.0, 1.0, size=f)
        if f > 1 and np.ptp(u) > 0:
            u = 2.0 * (u - u.min()) / np.ptp(u) - 1.0
        gains[c] = cfg.gain_spread ** (0.5 * u)
        offsets[c] = cfg.offset_scale * rng.uniform(-1.0, 1.0, size=f)
    return gains, offsets


def _utterance(rng, template, gain, offset, cfg: SynthCorpusConfig) -> np.ndarray:
    wander = rng.normal(0.0, 1.0, size=(cfg.frames, cfg.feature_dim)) * cfg.wander_sigma
    noise = rng.normal(0.0, 1.0, size=(cfg.frames, cfg.feature_dim)) * cfg.noise_sigma
    return gain * (template + wander) + offset + noise


def synth_corpus(cfg: SynthCorpusConfig | None = None) -> Corpus:
    """Generate train/dev/test partitions with speaker-disjoint train vs eval.

    Dev and test speakers get ``utts_per_channel`` channel-A utterances
    (enrolment) and as many channel-B utterances (trials).
    """
    cfg = cfg or SynthCorpusConfig()
    cfg.validate()
    gains, offsets = channel_transforms(cfg)
    n_total = cfg.n_train_speakers + cfg.n_dev_speakers + cfg.n_test_speakers
    templates = np.random.default_rng([cfg.seed, 0]).normal(
        0.0, cfg.template_scale, size=(n_total, cfg.feature_dim)
    )
    parts: dict[str, list[UtteranceFeatures]] = {"train": [], "dev": [], "test": []}
    bounds = np.cumsum([cfg.n_train_speakers, cfg.n_dev_speakers])
    for spk in range(n_total):
        part = "train" if spk < bounds[0] else "dev" if spk < bounds[1] else "test"
        if part == "train" and cfg.train_channels == "split":
            channels = [spk % 2]
        else:
            channels = [0, 1]
        rng = np.random.default_rng([cfg.seed, 1, spk])
        for ch in channels:
            for k in range(cfg.utts_per_channel):
                feats = _utterance(rng, templates[spk], gains[ch], offsets[ch], cfg)
                uid = f"{part}-s{spk:04d}-c{ch}-u{k:02d}"
                parts[part].append(UtteranceFeatures(feats, spk, ch, uid))
    return Corpus(parts["train"], parts["dev"], parts["test"], asdict(cfg))


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    features: np.ndarray  # [M, 1, T, F]
    speakers: np.ndarray  # [M] contiguous training-speaker indices
    channels: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.speakers)


def make_batches(
    utterances: list[UtteranceFeatures],
    n_speakers: int,
    n_utts: int,
    rng: np.random.Generator,
    label_of: dict[int, int] | None = None,
) -> list[Batch]:
    """One epoch of P x K batches.

    Speakers are shuffled, each speaker's utterances are shuffled and cut into
    groups of K, and consecutive groups are packed P at a time.  Utterances
    that do not fill a group, and groups that do not fill a batch, are dropped
    for this epoch.
    """
    by_spk: dict[int, list[UtteranceFeatures]] = {}
    for u in utterances:
        by_spk.setdefault(u.speaker_id, []).append(u)
    if label_of is None:
        label_of = {s: i for i, s in enumerate(sorted(by_spk))}
    eligible = sorted(s for s, us in by_spk.items() if len(us) >= n_utts)
    if len(eligible) < n_speakers:
        raise ValueError(
            f"need {n_speakers} speakers with >= {n_utts} utterances, corpus has {len(eligible)}"
        )
    order = rng.permutation(len(eligible))
    rounds: list[list[list[UtteranceFeatures]]] = []
    for si in order:
        us = by_spk[eligible[si]]
        perm = rng.permutation(len(us))
        for r in range(len(us) // n_utts):
            while len(rounds) <= r:
                rounds.append([])
            rounds[r].append([us[j] for j in perm[r * n_utts:(r + 1) * n_utts]])
    groups = [g for rnd in rounds for g in rnd]
    batches = []
    for b in range(len(groups) // n_speakers):
        members = [u for g in groups[b * n_speakers:(b + 1) * n_speakers] for u in g]
        batches.append(
            Batch(
                np.stack([u.features for u in members])[:, None],
                np.array([label_of[u.speaker_id] for u in members], dtype=np.intp),
                np.array([u.channel_id for u in members], dtype=np.intp),
            )
        )
    return batches


# ------------------------------------------------------------ file formats

_FEAT_MAGIC = b"CATF"
_FEAT_VERSION = 1


def write_features(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f8")
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC + struct.pack("<III", _FEAT_VERSION, t, f) + feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _FEAT_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise FeatureFileError(f"{path}: truncated header")
    version, t, f = struct.unpack_from("<III", raw, 4)
    if version != _FEAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if len(raw) != 16 + 8 * t * f:
        raise FeatureFileError(f"{path}: expected {t}x{f} values, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(t, f).astype(np.float64)


def save_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    """Write feature files plus one JSON-lines manifest per partition."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for name, utts in corpus.partitions().items():
        lines = []
        for u in utts:
            rel = os.path.join("feats", f"{u.utterance_id}.catf")
            write_features(out / rel, u.features)
            rec = {
                "utterance_id": u.utterance_id,
                "speaker_id": int(u.speaker_id),
                "channel_id": int(u.channel_id),
                "path": rel,
            }
            lines.append(json.dumps(rec, sort_keys=True))
        path = out / f"{name}.jsonl"
        path.write_text("".join(line + "\n" for line in lines))
        manifests[name] = path
    (out / "corpus.json").write_text(json.dumps(corpus.config, indent=2, sort_keys=True) + "\n")
    return manifests


def read_manifest(path) -> list[dict]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = {"utterance_id", "speaker_id", "channel_id", "path"} - rec.keys()
        if missing:
            raise ValueError(f"{path}:{i}: missing fields {sorted(missing)}")
        records.append(rec)
    return records


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    parts = {}
    for name in ("train", "dev", "test"):
        manifest = root / f"{name}.jsonl"
        if not manifest.exists():
            raise FileNotFoundError(f"missing manifest {manifest}")
        parts[name] = [
            UtteranceFeatures(read_features(root / r["path"]), r["speaker_id"], r["channel_id"], r["utterance_id"])
            for r in read_manifest(manifest)
        ]
    cfg_path = root / "corpus.json"
    config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    return Corpus(parts["train"], parts["dev"], parts["test"], config)
