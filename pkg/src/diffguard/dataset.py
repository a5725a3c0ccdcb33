"""Synthetic 32x32 benchmark images: a distinctive blob over a class-coded background.

The blob plays the part of the subject's identity (the region a protector
wants to keep safe); the background class plays the part of an edit prompt.
Condition id 0 is reserved for "no prompt", so background classes are 1..4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .masks import mask_family
from .seeding import derive_seed

N_CLASSES = 4
CLASS_MEANS = {1: 0.2, 2: 0.4, 3: 0.6, 4: 0.8}
IMAGE_SIZE = 32


@dataclass
class BenchItem:
    image_id: int
    image: np.ndarray  # (H, W, 1) float32 in [0, 1]
    m_gt: np.ndarray  # (H, W) uint8, 1 = sensitive region
    bg_class: int
    masks: dict[str, np.ndarray]  # "seen" plus the unseen family
    conds: tuple[int, ...] = (1, 2, 3, 4)


def background(cls: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Background texture whose mean is close to ``CLASS_MEANS[cls]``."""
    if cls not in CLASS_MEANS:
        raise UsageError(f"background class must be in 1..{N_CLASSES}, got {cls}")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    mean = CLASS_MEANS[cls]
    ang = rng.uniform(0, 2 * math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    if cls == 1:  # dark, gentle gradient
        img = mean + 0.08 * ((xx - 0.5) * math.cos(ang) + (yy - 0.5) * math.sin(ang))
    elif cls == 2:  # stripes
        u = xx * math.cos(ang) + yy * math.sin(ang)
        img = mean + 0.1 * np.sin(2 * math.pi * 4 * u + phase)
    elif cls == 3:  # soft checker
        img = mean + 0.08 * np.sin(2 * math.pi * 3 * xx + phase) * np.sin(2 * math.pi * 3 * yy + ang)
    else:  # bright, gentle gradient
        img = mean + 0.08 * ((xx - 0.5) * math.cos(ang) + (yy - 0.5) * math.sin(ang))
    return img


def _blob(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Rotated two-tone ellipse with a few interior features; returns (values, support)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(12, 20, 2)
    ry, rx = rng.uniform(6, 10, 2)
    th = rng.uniform(0, math.pi)
    u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
    v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
    support = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    tone_a, tone_b = rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65)
    split = rng.uniform(-0.3, 0.3)
    vals = np.where(v / ry < split, tone_a, tone_b)
    for _ in range(rng.integers(2, 4)):
        r = math.sqrt(rng.uniform(0, 0.5))
        a = rng.uniform(0, 2 * math.pi)
        fu, fv = r * rx * math.cos(a), r * ry * math.sin(a)
        fr = rng.uniform(1.2, 2.2)
        spot = (u - fu) ** 2 + (v - fv) ** 2 <= fr * fr
        vals = np.where(spot, 0.05 if rng.random() < 0.5 else 0.95, vals)
    return vals, support


def make_image(rng: np.random.Generator, bg_class: int, size: int = IMAGE_SIZE):
    """One composited image, its blob support and background class."""
    bg = background(bg_class, rng, size)
    vals, support = _blob(rng, size)
    img = np.clip(np.where(support, vals, bg), 0.0, 1.0)
    return img[..., None].astype(np.float32), support.astype(np.uint8)


def training_images(n: int, seed: int, size: int = IMAGE_SIZE, p_uncond: float = 0.1):
    """``n`` training images with condition ids; a fraction ``p_uncond`` is relabelled 0."""
    if n < 1:
        raise UsageError("need at least one training image")
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, size, size, 1), np.float32)
    conds = np.empty(n, np.int64)
    for i in range(n):
        cls = int(rng.integers(1, N_CLASSES + 1))
        imgs[i], _ = make_image(rng, cls, size)
        conds[i] = 0 if rng.random() < p_uncond else cls
    return imgs, conds


def generate_dataset(n_images: int, seed: int, size: int = IMAGE_SIZE) -> list[BenchItem]:
    """Deterministic benchmark items; item ``i`` depends only on (seed, i)."""
    if n_images < 1:
        raise UsageError("n_images must be >= 1")
    items = []
    for i in range(n_images):
        rng = np.random.default_rng(derive_seed(seed, "dataset", i))
        cls = int(rng.integers(1, N_CLASSES + 1))
        img, m_gt = make_image(rng, cls, size)
        fam = mask_family(m_gt, derive_seed(seed, "mask_family", i))
        items.append(BenchItem(i, img, m_gt, cls, fam))
    return items
