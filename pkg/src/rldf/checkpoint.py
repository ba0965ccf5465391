"""Binary checkpoint format.

All integers are little-endian.

=========  ===========================================================
bytes      content
=========  ===========================================================
8          magic ``b"RLDFCKPT"``
4          format version, uint32 (currently 1)
4          header length ``H``, uint32
H          UTF-8 JSON header: ``{"model": ModelConfig fields, "meta": {...}}``
4          tensor count ``N``, uint32
=========  ===========================================================

then ``N`` records, in ``state_dict`` order:

=========  ===========================================================
4          name length ``n``, uint32
n          UTF-8 parameter name
4          rank ``r``, uint32
8*r        dims, uint64 each
8*prod     values, float64, row-major
=========  ===========================================================

Names without a ``/`` are model parameters.  A training checkpoint adds the
frozen reference policy as ``ref/<name>`` and optimizer moments as
``opt/<index>/<field>``; its meta carries the outer step counter, so a run
resumed from it continues exactly where it stopped.

Writes go to a temporary file in the target directory followed by an atomic
rename, so a crash leaves either the old file or the complete new one.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointVersionError
from .model import DenoiserModel, ModelConfig

MAGIC = b"RLDFCKPT"
VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(cfg: ModelConfig, state: dict, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[ModelConfig, dict, dict]:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        name = data[off + 4:off + 4 + n].decode()
        off += 4 + n
        (rank,) = struct.unpack_from("<I", data, off)
        dims = struct.unpack_from(f"<{rank}Q", data, off + 4)
        off += 4 + 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        state[name] = torch.from_numpy(arr.astype(np.float64))
    return ModelConfig(**header["model"]), state, header.get("meta", {})


def save_checkpoint(path, model: DenoiserModel, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model.cfg, model.state_dict(), meta))


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    """Model weights and meta; training-state records are ignored."""
    cfg, state, meta = decode_checkpoint(Path(path).read_bytes())
    model = DenoiserModel(cfg)
    model.load_state_dict({k: v for k, v in state.items() if "/" not in k})
    return model, meta


def save_train_state(path, state, meta: dict | None = None) -> None:
    tensors = dict(state.model.state_dict())
    tensors.update({f"ref/{k}": v for k, v in state.ref.state_dict().items()})
    for idx, entry in state.optimizer.state_dict()["state"].items():
        for field, val in entry.items():
            tensors[f"opt/{idx}/{field}"] = torch.as_tensor(val)
    meta = dict(meta or {}, step=state.step)
    atomic_write_bytes(path, encode_checkpoint(state.model.cfg, tensors, meta))


def load_train_state(path, cfg):
    """Rebuild a :class:`~rldf.trainer.TrainState` saved by :func:`save_train_state`.

    A plain model checkpoint starts a fresh state with that model as both
    the policy and the reference.
    """
    from .trainer import TrainState

    mcfg, tensors, meta = decode_checkpoint(Path(path).read_bytes())
    model = DenoiserModel(mcfg)
    model.load_state_dict({k: v for k, v in tensors.items() if "/" not in k})
    state = TrainState.start(model, cfg)
    ref = {k[4:]: v for k, v in tensors.items() if k.startswith("ref/")}
    if not ref:
        return state, meta
    state.ref.load_state_dict(ref)
    opt_state: dict = {}
    for k, v in tensors.items():
        if k.startswith("opt/"):
            _, idx, field = k.split("/")
            # Adam keeps its step count as a float32 scalar
            opt_state.setdefault(int(idx), {})[field] = v.to(torch.float32) if field == "step" else v
    sd = state.optimizer.state_dict()
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": sd["param_groups"]})
    state.step = int(meta.get("step", 0))
    return state, meta
