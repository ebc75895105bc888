"""Versioned binary container shared by every model kind.

Layout: magic, u32 format version, u64 header length, UTF-8 JSON header
(which carries the tensor directory), then each tensor as little-endian
float64 in directory order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HLCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size
        blobs.append(a.tobytes())
    meta = json.dumps({**header, "tensors": directory}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(meta)))
        fh.write(meta)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a herdlife checkpoint")
    pos = len(MAGIC)
    if len(buf) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<IQ", buf, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    pos += 12
    if len(buf) < pos + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[pos:pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    pos += n
    total = sum(t["count"] for t in header["tensors"])
    if len(buf) - pos != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} data bytes, found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f8", offset=pos, count=total)
    tensors = {t["name"]: data[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).astype(np.float64)
               for t in header.pop("tensors")}
    return header, tensors
