import struct

import numpy as np
import pytest
import torch

from conftest import small_config
from histoclean import checkpoint as ckpt
from histoclean.trainer import ConfigMismatch, init_state, load_state, save_state

TINY = dict(base_width=8, disc_widths=(8, 16, 32, 64))


def test_roundtrip(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.asarray(2.5, dtype=np.float32)}
    ckpt.save(tmp_path / "c.bin", ckpt.CheckpointData({"k": [1, 2]}, arrays))
    data = ckpt.load(tmp_path / "c.bin")
    assert data.meta == {"k": [1, 2]}
    np.testing.assert_array_equal(data.arrays["w"], arrays["w"])
    assert data.arrays["s"].shape == ()
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == ckpt.MAGIC
    assert struct.unpack("<I", raw[8:12])[0] == ckpt.FORMAT_VERSION


def test_truncated_file_rejected(tmp_path):
    p = ckpt.save(tmp_path / "c.bin", ckpt.CheckpointData({}, {"w": np.ones(10, np.float32)}))
    raw = p.read_bytes()
    p.write_bytes(raw[:-7])
    with pytest.raises(ckpt.ChecksumError):
        ckpt.load(p)
    p.write_bytes(raw[:5])
    with pytest.raises(ckpt.ChecksumError):
        ckpt.load(p)


def test_flipped_byte_rejected(tmp_path):
    p = ckpt.save(tmp_path / "c.bin", ckpt.CheckpointData({}, {"w": np.ones(10, np.float32)}))
    raw = bytearray(p.read_bytes())
    raw[-40] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(ckpt.ChecksumError):
        ckpt.load(p)


def test_version_mismatch(tmp_path, monkeypatch):
    monkeypatch.setattr(ckpt, "FORMAT_VERSION", 99)
    p = ckpt.save(tmp_path / "c.bin", ckpt.CheckpointData({}, {}))
    monkeypatch.undo()
    with pytest.raises(ckpt.VersionMismatch):
        ckpt.load(p)


def test_latest_marker(tmp_path):
    ckpt.save(tmp_path / "a.bin", ckpt.CheckpointData({"n": 1}))
    ckpt.write_latest(tmp_path, "a.bin")
    assert ckpt.resolve(tmp_path) == tmp_path / "a.bin"
    assert ckpt.resolve(tmp_path / "latest") == tmp_path / "a.bin"
    assert ckpt.load(tmp_path / "latest").meta == {"n": 1}


def test_state_roundtrip(tmp_path):
    cfg = small_config("ws", **TINY)
    state = init_state(cfg)
    save_state(state, tmp_path / "s.bin")
    back = load_state(tmp_path / "s.bin")
    assert back.cfg == cfg
    for (k, v), (k2, v2) in zip(state.model.state_dict().items(), back.model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert torch.equal(state.gen.get_state(), back.gen.get_state())


def test_cond_checkpoint_rejects_ws_config(tmp_path):
    save_state(init_state(small_config("cond", **TINY)), tmp_path / "s.bin")
    with pytest.raises(ConfigMismatch, match="variant"):
        load_state(tmp_path / "s.bin", small_config("ws", **TINY))
    # the epoch budget may change on resume
    load_state(tmp_path / "s.bin", small_config("cond", epochs=50, **TINY))


def test_truncated_state_loads_nothing(tmp_path):
    p = save_state(init_state(small_config("base", **TINY)), tmp_path / "s.bin")
    p.write_bytes(p.read_bytes()[:1000])
    with pytest.raises(ckpt.ChecksumError):
        load_state(p)
