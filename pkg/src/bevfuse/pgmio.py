"""Minimal netpbm writers/readers (binary P5 grayscale, P6 color).

8-bit maps use maxval 255; 16-bit maps use maxval 65535 with big-endian
payload as the format requires.  Deterministic byte-for-byte output.
"""
from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {img.shape}")
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise ValueError(f"PGM supports uint8/uint16, got {img.dtype}")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM needs [H, W, 3] uint8, got {img.shape} {img.dtype}")
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    offset = 0
    while len(fields) < 4:
        while offset < len(blob) and blob[offset:offset + 1].isspace():
            offset += 1
        if blob[offset:offset + 1] == b"#":
            while offset < len(blob) and blob[offset:offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(blob) and not blob[offset:offset + 1].isspace():
            offset += 1
        fields.append(blob[start:offset])
    offset += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(blob, dtype=dtype, count=width * height, offset=offset)
    img = data.reshape(height, width)
    return img.astype(np.uint16) if maxval >= 256 else img.copy()


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Normalize a float map to the full 0..255 range (flat maps become 0)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-30:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
