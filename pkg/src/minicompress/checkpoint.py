"""Flat binary checkpoint archive for named parameter buffers.

Layout (all integers little-endian; documented here and stable):

    bytes 0..5    magic ``b"MCKP\\x01\\n"`` (format version 1)
    bytes 6..9    uint32 length of the JSON header that follows
    header        UTF-8 JSON with sorted keys:
                    {"meta": {...user metadata...},
                     "entries": [{"name": str, "shape": [int,...],
                                  "kind": "param"|"buffer"}, ...]}
    payload       for each entry in order, ``prod(shape)`` float64
                  little-endian values, C (row-major) order

Buffers are always written as 64-bit floats regardless of the in-memory
precision, so a checkpoint round-trips float32 models losslessly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import DataFormatError

MAGIC = b"MCKP\x01\n"


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict = None,
                kinds: Dict[str, str] = None) -> None:
    """Write named arrays (plus JSON-serializable ``meta``) to ``path``."""
    kinds = kinds or {}
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape),
                        "kind": kinds.get(name, "param")})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> Tuple[dict, Dict[str, np.ndarray], Dict[str, str]]:
    """Read a checkpoint; returns (meta, name->float64 array, name->kind)."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint file")
    hlen = int(np.frombuffer(raw[len(MAGIC):len(MAGIC) + 4], dtype="<u4")[0])
    off = len(MAGIC) + 4
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header ({exc})") from exc
    off += hlen
    arrays, kinds = {}, {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise DataFormatError(
                f"{path}: truncated payload for entry {entry['name']!r} "
                f"at offset {off}")
        arrays[entry["name"]] = np.frombuffer(
            raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        kinds[entry["name"]] = entry.get("kind", "param")
        off += nbytes
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header.get("meta", {}), arrays, kinds
