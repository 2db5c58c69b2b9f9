"""Binary checkpoint container and history CSVs shared by all trainers.

Layout: 4-byte magic ("AEPM" autoencoder, "GANP" adversarial pair, "RCVR"
recovery net), u32 version, u32 metadata length, UTF-8 JSON metadata, then
each tensor as u32 rank, u32 dims, float32 little-endian payload.  Values
round-trip bit-exactly at single precision.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from ldgan.errors import FormatError

VERSION = 1
MAGICS = (b"AEPM", b"GANP", b"RCVR")
_HEAD = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_MAX_RANK = 8
_MAX_DIM = 1 << 24


def save_params(path, magic: bytes, meta: dict, arrays) -> None:
    if magic not in MAGICS:
        raise FormatError(f"unknown checkpoint magic {magic!r}")
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(_U32.pack(arr.ndim))
            for d in arr.shape:
                fh.write(_U32.pack(d))
            fh.write(arr.tobytes())


def load_params(path, magic: bytes):
    """Returns (meta, list of float32 arrays); validates magic and framing."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    got, version, meta_len = _HEAD.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {got!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    if off + meta_len > len(raw):
        raise FormatError(f"{path}: metadata overruns file")
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    arrays = []
    while off < len(raw):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated tensor header")
        ndim = _U32.unpack_from(raw, off)[0]
        off += 4
        if ndim > _MAX_RANK:
            raise FormatError(f"{path}: tensor rank {ndim} exceeds limit")
        shape = []
        for _ in range(ndim):
            if off + 4 > len(raw):
                raise FormatError(f"{path}: truncated shape")
            d = _U32.unpack_from(raw, off)[0]
            off += 4
            if not 0 < d <= _MAX_DIM:
                raise FormatError(f"{path}: implausible dimension {d}")
            shape.append(d)
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: tensor payload overruns file")
        arrays.append(
            np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        )
        off += nbytes
    return meta, arrays


def write_history(path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v
