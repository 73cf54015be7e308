"""Binary tensor checkpoints.

Each tensor is one little-endian record::

    b"CPLT" | u32 version | u32 rank | u64 dims[rank] | f64 payload

Records are concatenated into ``<stem>.bin``; ``<stem>.json`` maps each
tensor id to the byte offset of its record, next to any caller metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"CPLT"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def encode_tensor(array):
    a = np.require(array, dtype="<f8", requirements="C")  # keeps 0-d arrays 0-d
    head = _HEAD.pack(MAGIC, VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf, offset=0):
    """Decode the record at ``offset``; return ``(array, next_offset)``."""
    try:
        magic, version, rank = _HEAD.unpack_from(buf, offset)
    except struct.error as e:
        raise DataError(f"truncated tensor record at offset {offset}") from e
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r} at offset {offset}")
    if version != VERSION:
        raise DataError(f"unsupported tensor record version {version}")
    pos = offset + _HEAD.size
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise DataError(f"truncated payload for record at offset {offset}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float64), end


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_tensors(stem, tensors, meta=None):
    """Write ``{id: array}`` to ``<stem>.bin`` + ``<stem>.json``; return both paths."""
    bin_path, man_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    offsets = {}
    chunks = []
    pos = 0
    for key in tensors:
        rec = encode_tensor(np.asarray(tensors[key]))
        offsets[key] = pos
        chunks.append(rec)
        pos += len(rec)
    bin_path.write_bytes(b"".join(chunks))
    manifest = {"format": "CPLT", "version": VERSION, "tensors": offsets}
    if meta:
        manifest["meta"] = meta
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bin_path, man_path


def load_tensors(stem):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    bin_path, man_path = _paths(stem)
    if not man_path.exists():
        raise FileNotFoundError(str(man_path))
    manifest = json.loads(man_path.read_text())
    buf = bin_path.read_bytes()
    out = {}
    for key, off in manifest["tensors"].items():
        out[key], _ = decode_tensor(buf, off)
    return out, manifest.get("meta", {})
