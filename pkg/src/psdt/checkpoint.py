"""PSDT checkpoint container: magic, version, JSON header, raw payload.

Layout: ``b"PSDT" | u32 version | u64 header_len | header JSON | payload``.
The header maps tensor names to dtype/shape/offset (offsets relative to the
payload start, validated non-overlapping and in-bounds on load) and carries
free-form metadata (config snapshot, rng state, step, adapter info).
Writes go to a temp file in the same directory and are renamed into place,
so a killed process never leaves a partial checkpoint at the final path.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSDT"
VERSION = 1

_DTYPES = {"f4": np.float32, "f8": np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    entries = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {
            "dtype": _DTYPE_TAGS[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    # no sort_keys: key order is semantic in places (the config's task-count
    # dict fixes task-id order) and insertion order is already deterministic
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header_end = 16 + header_len
    if header_end > len(data):
        raise CheckpointError(f"{path}: header overruns file")
    header = json.loads(data[16:header_end].decode("utf-8"))
    payload = data[header_end:]

    spans = []
    tensors: dict[str, np.ndarray] = {}
    for name, ent in header["tensors"].items():
        dtype = _DTYPES.get(ent["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {ent['dtype']!r}")
        shape = tuple(ent["shape"])
        start, nbytes = ent["offset"], ent["nbytes"]
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: tensor {name!r} byte count mismatch")
        if start < 0 or start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} offsets out of bounds")
        spans.append((start, start + nbytes, name))
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=expected // np.dtype(dtype).itemsize, offset=start)
        tensors[name] = arr.astype(dtype).reshape(shape)
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"{path}: tensors {n1!r} and {n2!r} overlap")
    return tensors, header.get("meta", {})
