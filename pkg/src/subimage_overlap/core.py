"""Shared domain types.

Rasters are numpy arrays in row-major (row, column) layout with the origin at
the top-left pixel. Images are float32 ``(H, W, 3)`` with intensities in
``[0, 1]``; label rasters are integer ``(H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvariantError(ValueError):
    """Raised when a domain object is constructed in an invalid state."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    where: str = ""

    def __str__(self) -> str:
        suffix = f" at {self.where}" if self.where else ""
        return f"{self.code}: {self.message}{suffix}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def _image_violations(pixels: np.ndarray) -> list[Violation]:
    out = []
    if pixels.ndim != 3:
        return [Violation("bad rank", f"expected (H, W, 3) raster, got shape {pixels.shape}")]
    h, w, c = pixels.shape
    if h < 1 or w < 1:
        out.append(Violation("empty raster", f"spatial dims must be >= 1, got {h}x{w}"))
    if c != 3:
        out.append(Violation("channel count", f"expected 3 channels, got {c}"))
    if pixels.size:
        finite = np.isfinite(pixels)
        bad = ~finite | (pixels < 0) | (pixels > 1)
        if bad.any():
            loc = tuple(int(i) for i in np.argwhere(bad)[0])
            out.append(Violation(
                "intensity out of range",
                f"{int(bad.sum())} values outside [0, 1]",
                where=f"pixel {loc}",
            ))
    return out


@dataclass(frozen=True, eq=False)
class ImageSample:
    """An RGB raster with an identifier and a dataset tag."""

    id: str
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        problems = _image_violations(pixels)
        if problems:
            raise InvariantError("; ".join(str(p) for p in problems))
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def with_pixels(self, pixels: np.ndarray, id: str | None = None) -> "ImageSample":
        return ImageSample(self.id if id is None else id, pixels, self.source)


@dataclass(frozen=True)
class SubimageSpec:
    """Rectangle ``[top, top + height) x [left, left + width)`` inside an image."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("top", "left", "height", "width"):
            value = getattr(self, name)
            if int(value) != value:
                raise InvariantError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.height < 1 or self.width < 1:
            raise InvariantError(f"subimage dims must be >= 1, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise InvariantError(f"offsets must be >= 0, got ({self.top}, {self.left})")

    def fits(self, image_dims: tuple[int, int]) -> bool:
        l, w = image_dims
        return self.top + self.height <= l and self.left + self.width <= w

    def check_fits(self, image_dims: tuple[int, int]) -> None:
        if not self.fits(image_dims):
            raise InvariantError(f"{self} does not fit inside image of dims {tuple(image_dims)}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))


@dataclass(frozen=True, eq=False)
class OverlapTarget:
    """Binary ``(l, w)`` mask, 1 inside the subimage rectangle and 0 elsewhere."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise InvariantError(f"mask must be 2-D, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise InvariantError("mask values must be 0 or 1")
        object.__setattr__(self, "mask", _frozen(mask.astype(np.uint8)))
        if self.mask.any():
            rows = np.flatnonzero(self.mask.any(axis=1))
            cols = np.flatnonzero(self.mask.any(axis=0))
            box = self.mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
            if not box.all():
                raise InvariantError("positive pixels do not form a single rectangle")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class SegmentationSample:
    image: ImageSample
    labels: np.ndarray
    num_classes: int
    ignore_index: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        problems = _label_violations(self.image.pixels, labels, self.num_classes, self.ignore_index)
        if problems:
            raise InvariantError("; ".join(str(p) for p in problems))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    @property
    def id(self) -> str:
        return self.image.id


def _label_violations(pixels, labels, num_classes, ignore_index) -> list[Violation]:
    out = []
    if num_classes < 1:
        out.append(Violation("class count", f"num_classes must be >= 1, got {num_classes}"))
    if labels.ndim != 2:
        return out + [Violation("bad rank", f"labels must be 2-D, got shape {labels.shape}")]
    if pixels.ndim >= 2 and labels.shape != pixels.shape[:2]:
        out.append(Violation(
            "shape mismatch",
            f"labels {labels.shape} vs image {pixels.shape[:2]}",
        ))
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        out.append(Violation("label dtype", f"labels must be integers, got {labels.dtype}"))
        return out
    valid = (labels >= 0) & (labels < num_classes)
    if ignore_index is not None:
        valid |= labels == ignore_index
    if not valid.all():
        loc = tuple(int(i) for i in np.argwhere(~valid)[0])
        out.append(Violation(
            "label out of range",
            f"{int((~valid).sum())} labels outside [0, {num_classes})",
            where=f"pixel {loc}",
        ))
    return out


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...] = ()
    seed: int = 0
    fraction: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        pairs = [("train", "val"), ("train", "test"), ("val", "test")]
        for a, b in pairs:
            common = set(getattr(self, a)) & set(getattr(self, b))
            if common:
                raise InvariantError(f"{a} and {b} share ids: {sorted(common)[:5]}")

    def ids(self, split: str) -> tuple[str, ...]:
        if split not in ("train", "val", "test"):
            raise KeyError(split)
        return getattr(self, split)


def validate_sample(sample) -> ValidationReport:
    """Check every invariant of an image or segmentation sample.

    Works on objects that bypassed construction checks (anything with a
    ``pixels`` attribute, or ``image`` plus ``labels``) and reports all
    violations instead of raising.
    """
    if hasattr(sample, "labels"):
        pixels = np.asarray(sample.image.pixels)
        problems = _image_violations(pixels)
        problems += _label_violations(
            pixels, np.asarray(sample.labels), sample.num_classes,
            getattr(sample, "ignore_index", None),
        )
    else:
        problems = _image_violations(np.asarray(sample.pixels))
    return ValidationReport(tuple(problems))
