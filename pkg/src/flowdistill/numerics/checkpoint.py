"""Checkpoint container: JSON manifest plus a little-endian float64 payload.

File layout::

    b"FDCKPT\\x00\\x01"                 8-byte magic
    uint64 little-endian            manifest length in bytes
    manifest (UTF-8 JSON)           {"format_version", "arrays": [...], "meta": {...}}
    payload                         concatenated '<f8' arrays, row-major

Each ``arrays`` entry is ``{"name", "shape", "offset", "count"}`` with the
offset in bytes from the start of the payload.  The manifest is written
with sorted keys so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FDCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.require(np.asarray(arrays[name], dtype="<f8"), requirements="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    payload = memoryview(blob)[16 + hlen:]
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(payload):
            raise CheckpointError(f"array {e['name']} extends past end of payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f8").astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
