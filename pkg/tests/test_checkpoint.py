import struct

import numpy as np
import pytest
import torch

from conftest import tiny_config
from rldf.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_train_state,
    save_checkpoint,
    save_train_state,
)
from rldf.diffusion import DecodeConfig
from rldf.errors import CheckpointVersionError
from rldf.model import DenoiserModel
from rldf.streams import substream
from rldf.tasks import generate_tasks
from rldf.trainer import TrainConfig, TrainState, train


def test_round_trip_is_bit_exact(tmp_path, peaked_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, peaked_model, {"note": "x"})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert back.cfg == peaked_model.cfg
    for (ka, a), (kb, b) in zip(peaked_model.state_dict().items(), back.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
    save_checkpoint(tmp_path / "again.ckpt", back, {"note": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_header_layout(peaked_model):
    data = encode_checkpoint(peaked_model.cfg, {"w": torch.arange(6, dtype=torch.float64).reshape(2, 3)})
    assert data[:8] == MAGIC
    version, hlen = struct.unpack_from("<II", data, 8)
    assert version == 1
    off = 16 + hlen
    assert struct.unpack_from("<I", data, off) == (1,)
    _, state, _ = decode_checkpoint(data)
    assert torch.equal(state["w"], torch.arange(6, dtype=torch.float64).reshape(2, 3))


def test_version_mismatch_raises(peaked_model):
    data = bytearray(encode_checkpoint(peaked_model.cfg, peaked_model.state_dict()))
    struct.pack_into("<I", data, 8, 2)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(data))
    with pytest.raises(ValueError):
        decode_checkpoint(b"NOTACKPT" + bytes(data[8:]))


def test_interrupted_write_leaves_old_file(tmp_path, peaked_model, monkeypatch):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, peaked_model)
    before = path.read_bytes()

    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr("rldf.checkpoint.os.replace", boom)
    with pytest.raises(KeyboardInterrupt):
        save_checkpoint(path, DenoiserModel(tiny_config(seed=99)))
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    tasks = generate_tasks("sort", 50, substream(0, "t"))
    cfg = TrainConfig(G=2, batch_size=2, k=3, lr=1e-3, seed=5, decode=DecodeConfig(length=8))
    init = DenoiserModel(tiny_config(init_std=0.3))

    full = TrainState.start(DenoiserModel(tiny_config(init_std=0.3)), cfg)
    whole = list(train(full, tasks, cfg, steps=4))

    part = TrainState.start(init, cfg)
    first = list(train(part, tasks, cfg, steps=2))
    save_train_state(tmp_path / "s.ckpt", part, {"run": "a"})
    resumed, meta = load_train_state(tmp_path / "s.ckpt", cfg)
    assert meta["step"] == 2 and meta["run"] == "a"
    rest = list(train(resumed, tasks, cfg, steps=2))

    assert first + rest == whole
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(full.ref.parameters(), resumed.ref.parameters()):
        assert torch.equal(a, b)


def test_plain_checkpoint_starts_fresh_train_state(tmp_path, peaked_model):
    save_checkpoint(tmp_path / "m.ckpt", peaked_model)
    state, _ = load_train_state(tmp_path / "m.ckpt", TrainConfig())
    assert state.step == 0
    for a, b in zip(state.ref.parameters(), peaked_model.parameters()):
        assert torch.equal(a, b)
    model, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert all(np.array_equal(a.detach().numpy(), b.detach().numpy())
               for a, b in zip(model.parameters(), peaked_model.parameters()))
