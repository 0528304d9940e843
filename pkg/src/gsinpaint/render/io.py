"""Image and depth files: 8-bit PNG and the GIDPTH01 float32 depth format.

Depth layout: 16-byte header (b"GIDPTH01", width u32 LE, height u32 LE)
followed by width * height little-endian float32 values, row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"GIDPTH01"


def write_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", w, h) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a GIDPTH01 depth file")
    w, h = struct.unpack("<II", buf[8:16])
    if len(buf) != 16 + 4 * w * h:
        raise ValueError(f"{path}: truncated depth data (expected {16 + 4 * w * h} bytes, got {len(buf)})")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
