"""Versioned binary checkpoints with named float64 parameter blocks.

Layout (little-endian)::

    b"MMCK" | version u32 | block count u32 | meta length u32 | meta JSON
    then per block: name length u32 | name utf-8 | ndim u32 | dims u32... | float64 payload

The JSON metadata carries the run config echo, the seed, the input shapes
and the class count, so a checkpoint alone is enough to rebuild the model.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig, from_dict
from .errors import CheckpointError
from .model import MultimodalClassifier, build_model

MAGIC = b"MMCK"
VERSION = 1
_HEAD = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")


def encode_checkpoint(model: MultimodalClassifier, meta: dict[str, Any]) -> bytes:
    meta = dict(meta)
    meta.setdefault("model", dataclasses.asdict(model.config))
    meta["shapes"] = [list(s) for s in model.shapes]
    meta["num_classes"] = model.num_classes
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    params = list(model.named_parameters())
    parts = [_HEAD.pack(MAGIC, VERSION, len(params), len(meta_bytes)), meta_bytes]
    for name, p in params:
        raw = name.encode()
        parts.append(_U32.pack(len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, model: MultimodalClassifier, meta: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, meta))
    return path


def decode_checkpoint(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(blob) < _HEAD.size:
        raise CheckpointError("bad checkpoint header: file too short")
    magic, version, count, meta_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint header: magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"bad checkpoint header: unsupported version {version}")
    off = _HEAD.size
    try:
        meta = json.loads(blob[off:off + meta_len].decode())
        off += meta_len
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = _U32.unpack_from(blob, off)
            off += 4
            name = blob[off:off + n].decode()
            off += n
            (ndim,) = _U32.unpack_from(blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * size
            if off + nbytes > len(blob):
                raise CheckpointError(f"truncated checkpoint in block {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after the last block")
    return meta, params


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def load_into(model: MultimodalClassifier, params: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape}, model expects {p.shape}")
        p.data[...] = params[name]


def restore_model(path: str | Path) -> tuple[MultimodalClassifier, dict[str, Any]]:
    meta, params = load_checkpoint(path)
    try:
        cfg = from_dict(ModelConfig, meta["model"], "model")
        model = build_model(cfg, [tuple(s) for s in meta["shapes"]], int(meta["num_classes"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from exc
    load_into(model, params)
    return model, meta

