"""Binary checkpoints: magic ``CATC``, version, JSON config, named float64 tensors.

Layout (all integers little-endian uint32)::

    "CATC" | version | config_len | config JSON | n_tensors |
    n_tensors x (name_len | name | rank | extents... | float64 data)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "state_dict",
    "load_state",
]

MAGIC = b"CATC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def encode_checkpoint(params: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(params: dict[str, np.ndarray], config: dict, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {raw[:4]!r}")
    r = _Reader(raw)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    config = json.loads(r.take(r.u32()).decode())
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = r.u32(rank) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after the last tensor")
    return params, config


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def state_dict(model) -> dict[str, np.ndarray]:
    """Copies of every parameter and batch-norm buffer, keyed by name."""
    out = {k: v.data.copy() for k, v in model.named_params().items()}
    out.update({k: v.copy() for k, v in model.named_buffers().items()})
    return out


def load_state(model, state: dict[str, np.ndarray]) -> None:
    params, buffers = model.named_params(), model.named_buffers()
    expected = set(params) | set(buffers)
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise CheckpointError(f"state mismatch: missing {missing}, unexpected {extra}")
    for k, t in params.items():
        if state[k].shape != t.shape:
            raise CheckpointError(f"{k}: shape {state[k].shape} != {t.shape}")
        t.data = state[k].copy()
    for k, buf in buffers.items():
        buf[...] = state[k]
