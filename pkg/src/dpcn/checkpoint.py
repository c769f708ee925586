"""Versioned binary checkpoints: text header, named little-endian arrays, SHA-256 trailer.

Layout::

    DPCNCKPT <version>\\n
    <header JSON>\\n          format tag, config digest, metadata, array index
    <array bytes ...>        concatenated in index order
    <32-byte SHA-256 of everything above>
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping

import numpy as np

MAGIC = b"DPCNCKPT"
FORMAT_VERSION = 1
_DIGEST_BYTES = 32


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    version: int
    config_digest: str
    meta: Dict[str, Any]
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def phase(self) -> int:
        return int(self.meta.get("phases_done", 0))


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] = None,
                    config_digest: str = "") -> None:
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        data = arr.astype(dt, copy=False).tobytes(order="C")
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"format": "dpcn-checkpoint", "version": FORMAT_VERSION,
              "config_digest": config_digest, "meta": dict(meta or {}), "arrays": index}
    body = b"".join([MAGIC, b" ", str(FORMAT_VERSION).encode(), b"\n",
                     json.dumps(header, sort_keys=True).encode("utf-8"), b"\n", *chunks])
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + _DIGEST_BYTES or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-_DIGEST_BYTES], blob[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt, "
                              f"{len(blob)} bytes)")
    first = body.index(b"\n")
    try:
        version = int(body[len(MAGIC):first].strip())
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable version tag") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    second = body.index(b"\n", first + 1)
    header = json.loads(body[first + 1:second].decode("utf-8"))
    payload = memoryview(body)[second + 1:]
    arrays = {}
    for entry in header["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: array {entry['name']} runs past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(version, header.get("config_digest", ""), header.get("meta", {}), arrays)
