"""Versioned named-tensor checkpoint container.

Binary layout, all integers little-endian:

    magic   4 bytes  b"NTC1"
    version u32      currently 1
    count   u32      number of tensor records
    record:
        name_len u32, name utf-8 bytes
        dtype    4 bytes, b"f32 "
        ndim     u32, dims u32 * ndim
        payload  float32 little-endian, C order

Records are written in sorted name order so identical state always produces
identical bytes.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"NTC1"
VERSION = 1
DTYPE_TAG = b"f32 "


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path, tensors: dict) -> None:
    """Write a name -> float32 array mapping (values cast if needed)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(DTYPE_TAG)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag = data[offset:offset + 4]
        offset += 4
        if tag != DTYPE_TAG:
            raise CheckpointError(f"{path}: record {name!r} has dtype tag {tag!r}")
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = arr.astype(np.float32).copy()
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def scalar(value) -> float:
    """Read back a metadata scalar (stored as a 1-element record)."""
    arr = np.asarray(value).reshape(-1)
    if arr.size != 1:
        raise CheckpointError(f"expected scalar record, got shape {np.shape(value)}")
    return float(arr[0])


def state_checksum(tensors: dict) -> str:
    """sha256 over (name, payload) pairs in sorted order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
