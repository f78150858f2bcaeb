"""Binary PGM (P5, maxval 255) reader/writer for grayscale frames.

Float frames in [0, 1] are quantized only here, at the I/O boundary;
8-bit data round-trips losslessly.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8 with rounding; error per pixel <= 1/255."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = quantize(img)
    if img.ndim != 2:
        raise ValueError(f"PGM frames are 2D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm_bytes(path) -> np.ndarray:
    """Raw uint8 pixel array from a binary PGM file."""
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=m.end(), count=h * w)
    if pixels.size != h * w:
        raise ValueError(f"{path}: truncated pixel payload")
    return pixels.reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    """Float frame in [0, 1]."""
    return read_pgm_bytes(path).astype(np.float64) / 255.0
