import struct

import numpy as np
import pytest

from chanadv.checkpoint import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_state,
    save_checkpoint,
    state_dict,
)
from chanadv.model import ModelConfig, build_model


def sample_params():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.normal(size=(2, 3)), "a.bias": rng.normal(size=3), "s": np.array(1.5),
            "k": rng.normal(size=(1, 2, 1, 2))}


def test_round_trip_is_exact(tmp_path):
    params = sample_params()
    cfg = {"arch": "cat", "beta": 1.0, "reduction": "mean"}
    save_checkpoint(params, cfg, tmp_path / "m.ckpt")
    back, back_cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert back_cfg == cfg
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape and np.array_equal(back[k], params[k])


def test_byte_layout():
    raw = encode_checkpoint({"w": np.array([[1.0, 2.0]])}, {"x": 1})
    assert raw[:4] == b"CATC"
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    assert version == 1 and raw[12:12 + cfg_len] == b'{"x": 1}'
    pos = 12 + cfg_len
    assert struct.unpack_from("<I", raw, pos)[0] == 1
    assert struct.unpack_from("<I", raw, pos + 4)[0] == 1 and raw[pos + 8:pos + 9] == b"w"
    assert struct.unpack_from("<III", raw, pos + 9) == (2, 1, 2)
    assert struct.unpack_from("<2d", raw, pos + 21) == (1.0, 2.0)
    assert len(raw) == pos + 21 + 16


def test_decode_errors():
    raw = encode_checkpoint(sample_params(), {})
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(b"CATX" + raw[4:])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])
    for cut in (6, 20, len(raw) - 1):
        with pytest.raises(CheckpointTruncatedError):
            decode_checkpoint(raw[:cut])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw + b"\0")


def test_state_dict_round_trip_through_model():
    cfg = ModelConfig(arch="cat", feature_dim=4, n_speakers=3, widths=[2] * 5, embed_dim=3, pool_stages=2)
    a, b = build_model(cfg), build_model(ModelConfig(**{**cfg.to_dict(), "seed": 9}))
    a.d1.bns[0].running_mean[:] = [3.0, 4.0]
    state = state_dict(a)
    assert "D1.bn0.running_mean" in state and "D2.fc1.weight" in state and "G.lstm0.weight" in state
    load_state(b, decode_checkpoint(encode_checkpoint(state, cfg.to_dict()))[0])
    for k, v in state_dict(b).items():
        assert np.array_equal(v, state[k])
    # the state is a copy, not a view
    a.d1.convs[0].weight.data[...] = 0.0
    assert np.any(state["D1.conv0.weight"])


def test_load_state_mismatch():
    cfg = ModelConfig(arch="cnn", feature_dim=4, n_speakers=3, widths=[2] * 5, embed_dim=3, pool_stages=2)
    model = build_model(cfg)
    state = state_dict(model)
    with pytest.raises(CheckpointError, match="missing"):
        load_state(model, {k: v for k, v in state.items() if k != "D1.head.bias"})
    with pytest.raises(CheckpointError, match="shape"):
        load_state(model, {**state, "D1.head.bias": np.zeros(4)})
