"""Checkpoint container.

Layout (little-endian)::

    12 bytes   magic b"FPNN-CKPT-1\\0"
    uint32     length L of the JSON metadata
    L bytes    UTF-8 JSON: model config, epoch, optimizer step, split settings
    uint32     blob count
    per blob:  uint16 name length, name (UTF-8), uint32 ndim, ndim x uint32 dims,
               float32 values

Blob names are prefixed ``param/``, ``adam.m/``, ``adam.v/``, ``bn.mean/`` and
``bn.var/``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ModelConfig, build_model, config_from_dict

MAGIC = b"FPNN-CKPT-1\x00"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    blobs: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return config_from_dict(self.meta["config"])

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack(f"<H{len(raw)}sI{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:12] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:12]!r}")
    try:
        (n,) = struct.unpack_from("<I", buf, 12)
        meta = json.loads(buf[16:16 + n].decode())
        pos = 16 + n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated blob {name!r}")
            blobs[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last blob")
    return Checkpoint(meta, blobs)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from e
    return from_bytes(buf)


def capture(model, epoch: int = 0, adam=None, extra: Optional[dict] = None) -> Checkpoint:
    """Snapshot a model (and optionally its optimizer state) into a checkpoint."""
    meta = {"config": model.config.to_dict(), "epoch": epoch, "adam_step": 0}
    meta.update(extra or {})
    blobs = {f"param/{p.name}": p.data for p in model.parameters()}
    for bn in model.batch_norms():
        blobs[f"bn.mean/{bn.name}"] = bn.state.mean
        blobs[f"bn.var/{bn.name}"] = bn.state.var
    if adam is not None:
        meta["adam_step"] = adam.step
        for name, m in adam.m.items():
            blobs[f"adam.m/{name}"] = m
            blobs[f"adam.v/{name}"] = adam.v[name]
    return Checkpoint(meta, blobs)


def restore(ckpt: Checkpoint, model=None, adam=None):
    """Load parameters and batch-norm statistics into ``model`` (built from the
    stored config when None) and optimizer moments into ``adam``."""
    if model is None:
        model = build_model(ckpt.config)
    elif model.config != ckpt.config:
        raise CheckpointError("checkpoint config does not match the model")
    for p in model.parameters():
        blob = ckpt.blobs.get(f"param/{p.name}")
        if blob is None or blob.shape != p.shape:
            raise CheckpointError(f"checkpoint lacks a matching blob for parameter {p.name}")
        p.data = blob.astype(p.data.dtype)
        p.zero_grad()
    for bn in model.batch_norms():
        bn.state.mean = ckpt.blobs[f"bn.mean/{bn.name}"].astype(bn.state.mean.dtype)
        bn.state.var = ckpt.blobs[f"bn.var/{bn.name}"].astype(bn.state.var.dtype)
    if adam is not None:
        adam.step = int(ckpt.meta.get("adam_step", 0))
        adam.m = {k[len("adam.m/"):]: v.copy() for k, v in ckpt.blobs.items() if k.startswith("adam.m/")}
        adam.v = {k[len("adam.v/"):]: v.copy() for k, v in ckpt.blobs.items() if k.startswith("adam.v/")}
    return model
