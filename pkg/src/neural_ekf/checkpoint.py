"""Versioned checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"NEKFCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted, no whitespace
    20+H    ...   tensor data: float64 little-endian, row-major, concatenated
                  in header order

The header is ``{"format_version": 1, "meta": {...}, "tensors": [{"name",
"shape", "offset", "count"}, ...]}`` where ``offset`` is relative to the start
of the data section and ``count`` is the number of float64 values. ``meta``
carries the model/training config echo, epoch index, optimizer step count,
loss history and the data normalization record.

Tensor names: ``param/<name>`` for model parameters and ``adam.m/<name>`` /
``adam.v/<name>`` for the optimizer moments.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = b"NEKFCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Unreadable checkpoint; ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass


def encode(tensors: dict, meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": entries},
        sort_keys=True, separators=(",", ":"), allow_nan=False,
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode(buf: bytes) -> tuple[dict, dict]:
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"truncated prefix: need {_PREFIX.size} bytes, file has {len(buf)}", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a neural-ekf checkpoint (bad magic)", 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported by this build (reads version {FORMAT_VERSION})", 8
        )
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise CheckpointError(f"truncated header: need {hlen} bytes, {len(buf) - start} available", len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", getattr(e, "start", 0))
        raise CheckpointError(f"corrupt header: {e}", start + pos) from None
    data0 = start + hlen
    tensors = {}
    for entry in header.get("tensors", []):
        lo = data0 + entry["offset"]
        hi = lo + 8 * entry["count"]
        if hi > len(buf):
            raise CheckpointError(f"truncated tensor {entry['name']!r}: needs bytes up to {hi}, file has {len(buf)}",
                                  len(buf))
        arr = np.frombuffer(buf, dtype="<f8", count=entry["count"], offset=lo)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    expected = data0 + sum(8 * e["count"] for e in header.get("tensors", []))
    if len(buf) != expected:
        raise CheckpointError(f"file has {len(buf) - expected} trailing bytes", expected)
    return tensors, header.get("meta", {})


def save_checkpoint(state: dict, path) -> Path:
    """Write ``{"tensors": {...}, "meta": {...}}`` atomically."""
    path = Path(path)
    data = encode(state["tensors"], state.get("meta", {}))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    tensors, meta = decode(Path(path).read_bytes())
    return {"tensors": tensors, "meta": meta}


# --- model/trainer glue ----------------------------------------------------


def training_state_to_checkpoint(state, model_config, train_config=None, normalization=None,
                                 extra_meta: dict | None = None) -> dict:
    from .trainer import TrainState  # noqa: F401  (documented type of ``state``)

    params = state.model.parameters()
    tensors = {f"param/{k}": v.value for k, v in params.items()}
    moments = state.optimizer.moments
    for k in params:
        if k in moments["m"]:
            tensors[f"adam.m/{k}"] = moments["m"][k]
            tensors[f"adam.v/{k}"] = moments["v"][k]
    meta = {
        "model_config": _config_dict(model_config),
        "train_config": None if train_config is None else train_config.to_dict(),
        "epoch": int(state.epoch),
        "adam_step": int(moments["t"]),
        "history": [dict(r) for r in state.history],
        "normalization": None if normalization is None else normalization.to_dict(),
    }
    if extra_meta:
        meta.update(extra_meta)
    return {"tensors": tensors, "meta": meta}


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["hidden_widths"] = list(d["hidden_widths"])
    return d


def restore(ck: dict):
    """Rebuild ``(model, TrainState, normalization)`` from a loaded checkpoint."""
    from .data import Normalization
    from .models import ModelConfig, NeuralEKF
    from .trainer import Adam, TrainState

    meta = ck["meta"]
    cfg = ModelConfig(**meta["model_config"])
    model = NeuralEKF.build(cfg, seed=0)
    params = model.parameters()
    for k, p in params.items():
        key = f"param/{k}"
        if key not in ck["tensors"]:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        arr = ck["tensors"][key]
        if arr.shape != p.value.shape:
            raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, model expects {p.value.shape}")
        p.value = arr.copy()
    lr = (meta.get("train_config") or {}).get("learning_rate", 1e-3)
    opt = Adam(lr)
    opt.moments = {
        "m": {k: ck["tensors"][f"adam.m/{k}"].copy() for k in params if f"adam.m/{k}" in ck["tensors"]},
        "v": {k: ck["tensors"][f"adam.v/{k}"].copy() for k in params if f"adam.v/{k}" in ck["tensors"]},
        "t": int(meta.get("adam_step", 0)),
    }
    state = TrainState(model, opt, epoch=int(meta.get("epoch", 0)), history=[dict(r) for r in meta.get("history", [])])
    norm = meta.get("normalization")
    return model, state, (None if norm is None else Normalization.from_dict(norm))
