"""Raw tensor file format used for datasets and checkpoints.

Layout (all integers little-endian):

    magic "NMT1" | u32 rank | u32 dims[rank] | u8 dtype (0=f32, 1=f64) | data

Data is packed little-endian in C order. One tensor per file; containers
(datasets, checkpoints) are directories of these files plus a JSON manifest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NMT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array)
    if a.dtype not in _TAG_FOR:
        raise FormatError(f"only float32/float64 tensors are serializable, got {a.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(struct.pack("<B", _TAG_FOR[a.dtype]))
        f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (rank,) = struct.unpack_from("<I", raw, off)
    off += 4
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<B", raw, off)
    off += 1
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if rank else 1
    expected = off + count * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    a = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(dims)
    return np.ascontiguousarray(a).astype(dt.newbyteorder("="), copy=False)
