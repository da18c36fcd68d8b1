"""Flat binary weight container, bit-exact on round-trip.

Layout (all integers little-endian u32):

    magic "GCVT" | version | param count
    per parameter: name length, UTF-8 name, rank, dims..., f32 LE data

Values are stored as float32; training keeps float64 internally, so a
store is quantized once on first save and stable thereafter.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import ParamStore
from .errors import WeightFormatError

MAGIC = b"GCVT"
VERSION = 1


def save_weights(store: ParamStore, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, var in store.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(var.value, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightFormatError(f"{path}: unsupported version {version}")
        pos = 12
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            store.add(name, arr.astype(np.float64))
        if pos != len(data):
            raise WeightFormatError(f"{path}: {len(data) - pos} trailing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"{path}: truncated or corrupt weight file: {exc}") from exc
    return store
