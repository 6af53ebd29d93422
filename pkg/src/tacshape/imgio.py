"""PFM / PGM image I/O.

PFM is written little-endian 32-bit float, row-major, bottom-up (negative
scale marks little-endian per the PFM convention). PGM is binary P5 with
maxval 255.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def write_pfm(path, data: np.ndarray) -> None:
    """Write a float image: (H, W) grayscale or (H, W, 3) color."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        channels = 1
    elif data.ndim == 3 and data.shape[2] == 3:
        channels = 3
    else:
        raise ValueError(f"unsupported PFM shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if channels == 3 else b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale = little endian
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: {path}")
        dims = fh.readline().decode("ascii")
        w, h = (int(tok) for tok in dims.split())
        scale = float(fh.readline().decode("ascii"))
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        data = np.frombuffer(fh.read(count * 4), dtype=endian + "f4").astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean or uint8 image as binary PGM (255 = set)."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        img = np.where(mask, 255, 0).astype(np.uint8)
    else:
        img = mask.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"not a binary PGM file: {path}")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pixels = np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8)
    return pixels.reshape(h, w).copy()
