"""Binary PGM (P5) / PPM (P6) images, 8-bit, mapped linearly to [0, 1]."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import UsageError

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def write_image(path, img) -> None:
    """(H, W) or (H, W, 1) as PGM; (H, W, 3) as PPM."""
    x = np.asarray(img, np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    if x.ndim == 2:
        magic = b"P5"
    elif x.ndim == 3 and x.shape[2] == 3:
        magic = b"P6"
    else:
        raise UsageError(f"cannot store image of shape {x.shape}")
    data = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)
    H, W = data.shape[:2]
    Path(path).write_bytes(magic + f"\n{W} {H}\n255\n".encode() + data.tobytes())


def read_image(path) -> np.ndarray:
    """Returns (H, W, C) float32 in [0, 1]."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise UsageError(f"{path}: not a binary PGM/PPM file")
    magic, W, H, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 256:
        raise UsageError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    C = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) < H * W * C:
        raise UsageError(f"{path}: truncated pixel data")
    data = np.frombuffer(body[:H * W * C], np.uint8).reshape(H, W, C)
    return (data.astype(np.float32) / maxval).astype(np.float32)


def write_mask(path, mask) -> None:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    write_image(path, (m > 0.5).astype(np.float64))


def read_mask(path) -> np.ndarray:
    """(H, W) uint8; pixels above 127 are inside."""
    img = read_image(path)
    if img.shape[2] != 1:
        raise UsageError(f"{path}: masks must be single-channel PGM")
    return (np.round(img[..., 0] * 255) > 127).astype(np.uint8)
