"""Bit-exact model checkpoints.

Layout::

    b"LRD1" | version (u32 le) | header length (u64 le) | JSON header | payload

The header holds the model config, a tensor directory (name, dtype, shape,
byte offset) and the SHA-256 of the payload. Payload tensors are raw
little-endian arrays in directory order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import DecoderModel, ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"LRD1"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def serialize(model: DecoderModel, meta: dict | None = None) -> bytes:
    cfg = model.config
    le = _DTYPES[cfg.dtype]
    chunks, directory, offset = [], [], 0
    for name in param_shapes(cfg):
        arr = np.ascontiguousarray(model.params[name].data, dtype=le)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": cfg.dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": dataclasses.asdict(cfg),
        "tensors": directory,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hb = _header_bytes(header)
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + payload


def save_checkpoint(model: DecoderModel, path: str | Path, meta: dict | None = None) -> str:
    """Write the checkpoint; returns the SHA-256 of the whole file."""
    blob = serialize(model, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 16 + hlen > len(blob):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    return header, 16 + hlen


def deserialize(blob: bytes) -> tuple[DecoderModel, dict]:
    header, start = read_header(blob)
    payload = blob[start:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload digest mismatch")
    cfg = ModelConfig(**header["config"])
    params = {}
    for entry in header["tensors"]:
        le = _DTYPES[entry["dtype"]]
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=le, count=n, offset=entry["offset"]).reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr.astype(cfg.np_dtype), requires_grad=True)
    return DecoderModel(cfg, params), header.get("meta", {})


def load_checkpoint(path: str | Path) -> DecoderModel:
    return deserialize(Path(path).read_bytes())[0]


def load_checkpoint_with_meta(path: str | Path) -> tuple[DecoderModel, dict]:
    return deserialize(Path(path).read_bytes())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
