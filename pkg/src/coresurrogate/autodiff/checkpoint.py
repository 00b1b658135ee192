"""Binary parameter checkpoints.

Layout: an 8-byte little-endian unsigned header length ``L``, then ``L`` bytes
of UTF-8 JSON ``{"version": 1, "entries": [{"name", "shape", "offset"}, ...],
"meta": {...}}``, then the concatenated parameters as little-endian float64.
``offset`` counts float64 values from the start of the data block.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset, blocks = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blocks.append(arr.ravel().tobytes())
    header = json.dumps({"version": CHECKPOINT_VERSION, "entries": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    Path(path).write_bytes(struct.pack("<Q", len(header)) + header + b"".join(blocks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode())
    if "version" not in header:
        raise ValueError(f"{path}: checkpoint header lacks a version field")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    data = np.frombuffer(raw[8 + n:], dtype="<f8")
    params = {}
    for e in header["entries"]:
        size = int(np.prod(e["shape"], dtype=int))
        chunk = data[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path}: entry {e['name']} runs past the data block")
        params[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return params, header.get("meta", {})


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
