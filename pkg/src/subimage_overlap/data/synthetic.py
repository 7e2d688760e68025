"""Procedural land-cover-like scenes for desk-scale experiments.

Each scene is a smooth colour field (class 0) with textured shapes on top.
Every foreground class has its own colour family and stripe texture, so
classes are separable from local appearance and any window of the scene has
distinctive content to localise.
"""

from __future__ import annotations

import numpy as np

from ..core import ImageSample, SegmentationSample
from .adapters import InMemoryDataset
from .splits import allocate_val_split


def _smooth_field(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    field = np.empty((h, w, 3), dtype=np.float32)
    for ch in range(3):
        acc = np.full((h, w), rng.uniform(0.25, 0.6), dtype=np.float32)
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        field[..., ch] = acc
    return field


def _class_palette(num_classes, rng):
    base = rng.uniform(0.1, 0.9, size=(num_classes, 3)).astype(np.float32)
    angles = np.linspace(0, np.pi, num_classes, endpoint=False) + rng.uniform(0, np.pi / 8)
    periods = 3.0 + 2.0 * np.arange(num_classes) % 7
    return base, angles, periods


def _shape_mask(rng, h, w, min_side, max_side):
    ph = int(rng.integers(min_side, max_side + 1))
    pw = int(rng.integers(min_side, max_side + 1))
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return ((yy - cy) / (ph / 2)) ** 2 + ((xx - cx) / (pw / 2)) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ph / 2) & (np.abs(xx - cx) <= pw / 2)


def _scene(rng, h, w, num_classes, palette):
    base, angles, periods = palette
    pixels = _smooth_field(rng, h, w)
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    min_side, max_side = max(h // 8, 2), max(h // 3, 3)
    order = []
    for c in range(1, num_classes):
        order += [c] * int(rng.integers(1, 3))
    rng.shuffle(order)
    for c in order:
        mask = _shape_mask(rng, h, w, min_side, max_side)
        if not mask.any():
            continue
        tint = np.clip(base[c] + rng.normal(0, 0.05, size=3), 0, 1)
        u = np.cos(angles[c]) * xx + np.sin(angles[c]) * yy
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * u / periods[c] + rng.uniform(0, 2 * np.pi))
        texture = tint[None, None, :] * (0.7 + 0.3 * stripes[..., None])
        pixels[mask] = texture[mask]
        labels[mask] = c
    pixels += rng.normal(0, 0.02, size=pixels.shape).astype(np.float32)
    return np.clip(pixels, 0, 1).astype(np.float32), labels


def generate_synthetic_dataset(n: int = 200, dims=(64, 64), classes: int = 3, seed: int = 0,
                               val_fraction: float = 0.2) -> InMemoryDataset:
    """Seeded synthetic segmentation dataset with a fixed train/val split."""
    if n < 2:
        raise ValueError("need at least two images for a train/val split")
    if classes < 2:
        raise ValueError("need at least two classes")
    h, w = dims
    rng = np.random.default_rng(seed)
    palette = _class_palette(classes, rng)
    samples = {}
    for i in range(n):
        pixels, labels = _scene(rng, h, w, classes, palette)
        sid = f"syn{seed}_{i:05d}"
        samples[sid] = SegmentationSample(ImageSample(sid, pixels, "synthetic"), labels, classes)
    split = allocate_val_split(list(samples), val_fraction, seed)
    return InMemoryDataset(
        name="synthetic",
        num_classes=classes,
        splits={s: [samples[i] for i in split.ids(s)] for s in ("train", "val")},
        assignment=split,
    )
