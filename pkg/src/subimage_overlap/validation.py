"""Input checks for the estimator API.

Images are accepted as a single ``(H, W, 3)`` array or a batch
``(N, H, W, 3)``; uint8 input is scaled to [0, 1]. Everything else must
already be floating point in [0, 1].
"""

from __future__ import annotations

import numpy as np


def check_images(X, *, name: str = "X", allow_single: bool = True) -> np.ndarray:
    """Return a float32 ``(N, H, W, 3)`` batch in [0, 1]."""
    if isinstance(X, (list, tuple)):
        shapes = {np.shape(x) for x in X}
        if len(shapes) > 1:
            raise ValueError(f"{name}: images differ in shape {sorted(shapes)}")
    arr = np.asarray(X)
    if arr.dtype == object:
        raise ValueError(f"{name}: expected a numeric array, got dtype object")
    if arr.ndim == 3 and allow_single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected 3 channels, got {arr.shape[-1]}")
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError(f"{name}: empty input {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name}: expected uint8 or float pixels, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains NaN or inf")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0 or hi > 1:
        raise ValueError(f"{name}: float pixels must lie in [0, 1], found [{lo:.4g}, {hi:.4g}]")
    return arr.astype(np.float32, copy=False)


def check_labels(y, images: np.ndarray, num_classes: int | None = None,
                 ignore_index: int | None = None, *, name: str = "y") -> np.ndarray:
    """Return int64 ``(N, H, W)`` labels matching ``images``."""
    arr = np.asarray(y)
    if arr.ndim == 2 and images.shape[0] == 1:
        arr = arr[None]
    if arr.shape != images.shape[:3]:
        raise ValueError(f"{name}: label shape {arr.shape} does not match images {images.shape[:3]}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(np.mod(arr, 1) == 0):
            arr = arr.astype(np.int64)
        else:
            raise ValueError(f"{name}: labels must be integers, got {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    valid = arr if ignore_index is None else arr[arr != ignore_index]
    if valid.size and valid.min() < 0:
        raise ValueError(f"{name}: negative label {int(valid.min())}")
    if num_classes is not None and valid.size and valid.max() >= num_classes:
        raise ValueError(f"{name}: label {int(valid.max())} outside 0..{num_classes - 1}")
    return arr


def check_pair_dims(images: np.ndarray, subimages: np.ndarray) -> None:
    if images.shape[0] != subimages.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {subimages.shape[0]} subimages")
    if subimages.shape[1] > images.shape[1] or subimages.shape[2] > images.shape[2]:
        raise ValueError(
            f"subimage {subimages.shape[1:3]} is larger than image {images.shape[1:3]}"
        )
