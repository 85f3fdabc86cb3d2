"""Checkpoint container and on-disk format.

Layout: 8-byte magic ``RACPKT01``, a little-endian u64 header length, a
UTF-8 JSON header (config echo, step counter, RNG state, and one
name/shape/dtype/offset entry per tensor), then the raw little-endian
IEEE-754 payload.  The header is serialized with sorted keys so identical
checkpoints produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RACPKT01"

_DTYPES = {"<f4": "<f4", "<f8": "<f8"}


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save(path: str, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        blob = arr.astype(tag).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": tag, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": _json_safe(ckpt.config),
        "step": int(ckpt.step),
        "rng_state": _json_safe(ckpt.rng_state) if ckpt.rng_state else None,
        "tensors": entries,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.asarray([len(hbytes)], dtype="<u8").tobytes())
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{path}: missing header length")
    hlen = int(np.frombuffer(raw, "<u8", count=1, offset=8)[0])
    hstart, hend = 16, 16 + hlen
    if len(raw) < hend:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(raw[hstart:hend].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header") from e
    payload = raw[hend:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} of {header['payload_bytes']} bytes")
    params = {}
    for ent in header["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(payload, dt, count=count, offset=ent["offset"])
        params[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return Checkpoint(params, header.get("config") or {}, header.get("step", 0),
                      header.get("rng_state"))
