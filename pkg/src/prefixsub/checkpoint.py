"""Checkpoint container.

Layout::

    b"PFXSUBCK"                   8-byte magic
    uint64 little-endian          length of the JSON header in bytes
    JSON header (UTF-8)           {"format_version", "kind", "config", "meta", "tensors": [...]}
    payload                       little-endian float32 blocks, one per tensor

Each tensor entry records ``name``, ``shape``, ``offset`` and ``nbytes``;
offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import InputError

MAGIC = b"PFXSUBCK"
FORMAT_VERSION = 1
KINDS = ("base", "simplex", "baked")


def save_container(path, tensors: Mapping[str, np.ndarray], kind: str,
                   config: Mapping[str, Any] | None = None,
                   meta: Mapping[str, Any] | None = None) -> None:
    if kind not in KINDS:
        raise InputError(f"unknown checkpoint kind {kind!r}")
    entries = []
    blocks = []
    offset = 0
    for name, arr in tensors.items():
        block = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(block)})
        blocks.append(block)
        offset += len(block)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for block in blocks:
            fh.write(block)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise InputError(f"{path}: not a checkpoint container")
    (length,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(length).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_container(path, dtype=np.float32) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, {name: array})``."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        chunk = payload[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise InputError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype)
    return header, tensors
