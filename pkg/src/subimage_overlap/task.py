"""Pretraining example generation for subimage overlap prediction.

An example is the (augmented) full image, an independently augmented crop of
it, and a binary mask marking where the crop came from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torchvision.transforms import functional as TF

from .core import ImageSample, InvariantError, OverlapTarget, SubimageSpec

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentationConfig:
    flip_enabled: bool = False
    jitter_enabled: bool = False
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue: tuple[float, float] = (-0.1, 0.1)
    apply_to_train_only: bool = True
    # the two stages of the pipeline can be toggled separately
    augment_full: bool = True
    augment_sub: bool = True

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo < 0 or not np.isclose(lo + hi, 2.0):
                raise InvariantError(f"{name} range {(lo, hi)} must be symmetric around 1.0")
        lo, hi = self.hue
        if not np.isclose(lo, -hi) or not 0 <= hi <= 0.5:
            raise InvariantError(f"hue range {(lo, hi)} must be symmetric around 0 within 0.5")

    @property
    def enabled(self) -> bool:
        return self.flip_enabled or self.jitter_enabled

    def active_for(self, split: str) -> bool:
        return self.enabled and (split == "train" or not self.apply_to_train_only)


@dataclass(frozen=True)
class FlipRecord:
    horizontal: bool = False
    vertical: bool = False


@dataclass(frozen=True)
class JitterFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


@dataclass(frozen=True, eq=False)
class PretrainExample:
    full_image: ImageSample
    subimage: ImageSample
    target: OverlapTarget
    spec: SubimageSpec
    full_flips: FlipRecord = FlipRecord()
    sub_flips: FlipRecord = FlipRecord()


def select_subimage(image_dims, sub_dims, rng: np.random.Generator) -> SubimageSpec:
    """Place a ``sub_dims`` rectangle uniformly over all legal integer offsets."""
    l, w = (int(d) for d in image_dims)
    p_l, p_w = (int(d) for d in sub_dims)
    if p_l < 1 or p_w < 1:
        raise ValueError(f"subimage dims must be positive, got {(p_l, p_w)}")
    if p_l > l or p_w > w:
        raise ValueError(f"subimage {(p_l, p_w)} does not fit in image {(l, w)}")
    top = int(rng.integers(0, l - p_l + 1))
    left = int(rng.integers(0, w - p_w + 1))
    return SubimageSpec(top, left, p_l, p_w)


def make_overlap_mask(spec: SubimageSpec, image_dims) -> OverlapTarget:
    spec.check_fits(image_dims)
    mask = np.zeros(tuple(int(d) for d in image_dims), dtype=np.uint8)
    mask[spec.slices] = 1
    return OverlapTarget(mask)


def apply_flips(image: np.ndarray, rng) -> tuple[np.ndarray, FlipRecord]:
    """Flip horizontally and vertically, each independently with probability 0.5.

    Always draws exactly two uniforms so rng consumption does not depend on
    the outcome.
    """
    u_h, u_v = rng.random(), rng.random()
    record = FlipRecord(horizontal=bool(u_h < 0.5), vertical=bool(u_v < 0.5))
    return flip(image, record), record


def flip(image: np.ndarray, record: FlipRecord) -> np.ndarray:
    if record.horizontal:
        image = image[:, ::-1]
    if record.vertical:
        image = image[::-1, :]
    return np.ascontiguousarray(image)


def draw_jitter(config: AugmentationConfig, rng) -> JitterFactors:
    return JitterFactors(
        brightness=float(rng.uniform(*config.brightness)),
        contrast=float(rng.uniform(*config.contrast)),
        saturation=float(rng.uniform(*config.saturation)),
        hue=float(rng.uniform(*config.hue)),
    )


def jitter(image: np.ndarray, factors: JitterFactors) -> np.ndarray:
    """Brightness, contrast, saturation then hue, clamping after each step.

    Contrast blends each channel toward its own mean; saturation blends
    toward the luma grayscale.
    """
    out = np.asarray(image, dtype=np.float32)
    if factors.brightness != 1.0:
        out = np.clip(out * factors.brightness, 0.0, 1.0)
    if factors.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = np.clip(mean + factors.contrast * (out - mean), 0.0, 1.0)
    if factors.saturation != 1.0:
        gray = (out @ _LUMA)[..., None]
        out = np.clip(gray + factors.saturation * (out - gray), 0.0, 1.0)
    if factors.hue != 0.0:
        chw = torch.from_numpy(np.ascontiguousarray(out.transpose(2, 0, 1)))
        out = TF.adjust_hue(chw, factors.hue).numpy().transpose(1, 2, 0)
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_jitter(image: np.ndarray, config: AugmentationConfig, rng) -> np.ndarray:
    return jitter(image, draw_jitter(config, rng))


def augment(image: np.ndarray, config: AugmentationConfig, rng) -> tuple[np.ndarray, FlipRecord]:
    record = FlipRecord()
    if config.flip_enabled:
        image, record = apply_flips(image, rng)
    if config.jitter_enabled:
        image = apply_jitter(image, config, rng)
    return image, record


def assemble_pretrain_example(
    sample: ImageSample,
    sub_dims,
    aug: AugmentationConfig,
    split: str,
    rng: np.random.Generator,
    spec: SubimageSpec | None = None,
) -> PretrainExample:
    """Build one example: augment full image, place subimage, mask, crop, re-augment crop.

    The rng is split into three independent streams (full-image
    augmentation, placement, subimage augmentation) so toggling one stage
    never shifts the draws of another. Passing ``spec`` skips placement.
    """
    full_rng, place_rng, sub_rng = rng.spawn(3)
    active = aug.active_for(split)

    pixels = sample.pixels
    full_flips = FlipRecord()
    if active and aug.augment_full:
        pixels, full_flips = augment(pixels, aug, full_rng)

    dims = pixels.shape[:2]
    if spec is None:
        spec = select_subimage(dims, sub_dims, place_rng)
    target = make_overlap_mask(spec, dims)

    crop = pixels[spec.slices]
    sub_flips = FlipRecord()
    if active and aug.augment_sub:
        crop, sub_flips = augment(crop, aug, sub_rng)

    return PretrainExample(
        full_image=sample.with_pixels(pixels),
        subimage=sample.with_pixels(crop, id=f"{sample.id}/sub"),
        target=target,
        spec=spec,
        full_flips=full_flips,
        sub_flips=sub_flips,
    )
