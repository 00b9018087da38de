"""Flat binary checkpoint format for named parameters.

Layout (all integers little-endian uint32, floats little-endian float64):

    magic   b"BVFZ"
    version u32 (currently 1)
    count   u32
    then per parameter, in the order given at save time:
        name_len u32, name bytes (utf-8),
        rank u32, dims u32 * rank,
        payload float64 * prod(dims), row-major.

Round trips are bit-identical; loading verifies names and shapes against the
receiving model.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BVFZ"
VERSION = 1


def save_checkpoint(path, named_params) -> None:
    items = list(named_params)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise ValueError(f"duplicate parameter name: {name}")
        seen.add(name)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, param in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dims = param.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(param.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into {name: ndarray} without needing a model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        out[name] = arr.copy()
    if offset != len(blob):
        raise ValueError("trailing bytes after last parameter")
    return out


def load_checkpoint(path, named_params) -> None:
    """Copy stored values into existing parameters, by name, verifying shape."""
    stored = read_checkpoint(path)
    items = list(named_params)
    for name, param in items:
        if name not in stored:
            raise KeyError(f"checkpoint is missing parameter: {name}")
        arr = stored.pop(name)
        if arr.shape != param.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {param.data.shape}"
            )
        param.data[...] = arr
        param.name = name
    if stored:
        extra = ", ".join(sorted(stored))
        raise ValueError(f"checkpoint has unknown parameters: {extra}")
