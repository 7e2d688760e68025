"""Resize, crop and tile operations applied identically to image and labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..core import SegmentationSample


def _parts(sample):
    if isinstance(sample, SegmentationSample):
        return sample.image, sample.labels
    return sample, None


def _rebuild(sample, pixels, labels, id=None):
    if isinstance(sample, SegmentationSample):
        image = sample.image.with_pixels(pixels, id=id)
        return SegmentationSample(image, labels, sample.num_classes, sample.ignore_index)
    return sample.with_pixels(pixels, id=id)


def resize_pixels(pixels: np.ndarray, size) -> np.ndarray:
    h, w = (int(s) for s in size)
    if pixels.shape[:2] == (h, w):
        return pixels
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    shrinking = h < pixels.shape[0] or w < pixels.shape[1]
    x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=shrinking)
    return x[0].permute(1, 2, 0).clamp_(0.0, 1.0).numpy()


def resize_labels(labels: np.ndarray, size) -> np.ndarray:
    h, w = (int(s) for s in size)
    if labels.shape == (h, w):
        return labels
    x = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))[None, None].double()
    x = F.interpolate(x, size=(h, w), mode="nearest-exact")
    return x[0, 0].long().numpy()


def resize(sample, target):
    """Bilinear for the image, nearest-neighbour for labels."""
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {target}")
    image, labels = _parts(sample)
    if image.shape == (h, w):
        return sample
    pixels = resize_pixels(image.pixels, (h, w))
    return _rebuild(sample, pixels, None if labels is None else resize_labels(labels, (h, w)))


def crop_window(dims, size: int, mode: str, rng=None) -> tuple[int, int]:
    """Top-left corner of a ``size`` x ``size`` window: random, or centred (floored)."""
    l, w = dims
    if l < size or w < size:
        raise ValueError(f"image {l}x{w} is smaller than crop size {size}")
    if mode == "center":
        return (l - size) // 2, (w - size) // 2
    if mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        return int(rng.integers(0, l - size + 1)), int(rng.integers(0, w - size + 1))
    raise ValueError(f"unknown crop mode {mode!r}")


def crop(sample, size: int = 512, mode: str = "random", rng=None):
    image, labels = _parts(sample)
    top, left = crop_window(image.shape, size, mode, rng)
    window = (slice(top, top + size), slice(left, left + size))
    return _rebuild(sample, image.pixels[window], None if labels is None else labels[window])


@dataclass(frozen=True)
class Tile:
    sample: object
    parent_id: str
    row: int
    col: int
    index: int
    truncated: tuple[int, int] = (0, 0)


def tile_name(parent_id: str, row: int, col: int) -> str:
    return f"{parent_id}_{row}_{col}"


def tile_grid(sample, grid: int = 4) -> list[Tile]:
    """Split into ``grid`` x ``grid`` equal tiles in row-major order.

    When the dims are not divisible the bottom/right remainder is dropped and
    recorded in each tile's ``truncated`` field as (rows, cols).
    """
    image, labels = _parts(sample)
    l, w = image.shape
    th, tw = l // grid, w // grid
    if th < 1 or tw < 1:
        raise ValueError(f"image {l}x{w} too small for a {grid}x{grid} grid")
    dropped = (l - th * grid, w - tw * grid)
    tiles = []
    for r in range(grid):
        for c in range(grid):
            window = (slice(r * th, (r + 1) * th), slice(c * tw, (c + 1) * tw))
            part = _rebuild(sample, image.pixels[window],
                            None if labels is None else labels[window],
                            id=tile_name(image.id, r, c))
            tiles.append(Tile(part, image.id, r, c, r * grid + c, dropped))
    return tiles


def assemble_tiles(tiles: list[Tile], grid: int = 4) -> np.ndarray:
    """Inverse of :func:`tile_grid` for the image pixels."""
    rows = []
    for r in range(grid):
        row = [t for t in tiles if t.row == r]
        row.sort(key=lambda t: t.col)
        rows.append(np.concatenate([_parts(t.sample)[0].pixels for t in row], axis=1))
    return np.concatenate(rows, axis=0)


def preprocess(sample, resolution, crop_size: int | None = None, split: str = "train", rng=None):
    """Crop (random on train, centred otherwise) then resize to ``resolution``."""
    if crop_size is not None:
        image = _parts(sample)[0]
        if min(image.shape) >= crop_size:
            mode = "random" if split == "train" and rng is not None else "center"
            sample = crop(sample, crop_size, mode, rng)
    return resize(sample, resolution)


def flip_pair(sample, record):
    """Apply a flip record to image and labels alike."""
    from ..task import flip

    image, labels = _parts(sample)
    return _rebuild(sample, flip(image.pixels, record),
                    None if labels is None else flip(labels, record))
