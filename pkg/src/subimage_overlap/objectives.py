"""Losses, class weighting and IoU evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import OverlapTarget

#: default weights for the two-class (background, subimage) pretext task
OVERLAP_ALPHA = (0.25, 0.75)
OVERLAP_GAMMA = 1.5


@dataclass(frozen=True)
class ClassWeights:
    alpha: tuple[float, ...]

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        if not alpha:
            raise ValueError("class weights must be non-empty")
        if any(not np.isfinite(a) or a <= 0 for a in alpha):
            raise ValueError(f"class weights must be positive and finite, got {alpha}")
        object.__setattr__(self, "alpha", alpha)

    def __len__(self) -> int:
        return len(self.alpha)

    def as_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.tensor(self.alpha, dtype=like.dtype, device=like.device)


def _per_pixel_terms(logits, target, ignore_index):
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.dim() != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    num_classes = logits.shape[1]
    target = target.long()
    valid = torch.ones_like(target, dtype=torch.bool)
    if ignore_index is not None:
        valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= num_classes))
    if bad.any():
        raise ValueError(f"labels outside [0, {num_classes}) that are not ignore_index")
    safe = torch.where(valid, target, torch.zeros_like(target))
    log_p = F.log_softmax(logits, dim=1)
    log_pt = log_p.gather(1, safe.unsqueeze(1)).squeeze(1)
    return log_pt, safe, valid


def _alpha_t(alpha, safe, like):
    if alpha is None:
        return 1.0
    if not isinstance(alpha, ClassWeights):
        alpha = ClassWeights(tuple(alpha))
    if len(alpha) != like.shape[1]:
        raise ValueError(f"{len(alpha)} class weights for {like.shape[1]} classes")
    return alpha.as_tensor(like)[safe]


def focal_loss(logits, target, alpha=None, gamma: float = OVERLAP_GAMMA, ignore_index=None):
    """Softmax focal loss ``-alpha_t (1 - p_t)^gamma log p_t``.

    ``logits`` is ``(N, C, H, W)`` or ``(C, H, W)``; the result is the mean
    over non-ignored pixels.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    log_pt, safe, valid = _per_pixel_terms(logits, target, ignore_index)
    loss = -log_pt
    if gamma:
        pt = log_pt.exp()
        loss = (1.0 - pt).clamp(min=0.0) ** gamma * loss
    loss = _alpha_t(alpha, safe, logits if logits.dim() == 4 else logits.unsqueeze(0)) * loss
    count = valid.sum()
    if count == 0:
        return logits.sum() * 0.0
    return (loss * valid).sum() / count


def cross_entropy(logits, target, alpha=None, ignore_index=None):
    """Class-weighted cross-entropy, averaged over non-ignored pixels."""
    return focal_loss(logits, target, alpha=alpha, gamma=0.0, ignore_index=ignore_index)


def pixel_counts(labels, num_classes: int, ignore_index=None) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    if ignore_index is not None:
        labels = labels[labels != ignore_index]
    return np.bincount(labels, minlength=num_classes)[:num_classes]


def inverse_sqrt_class_weights(pixel_counts, floor: int | None = None) -> ClassWeights:
    """Weights proportional to ``1 / sqrt(frequency)``, rescaled to sum to C.

    A class with zero pixels has no defined frequency; pass ``floor`` to use
    that count for empty classes instead.
    """
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("pixel_counts must be a non-empty vector")
    if floor is not None:
        counts = np.where(counts > 0, counts, float(floor))
    if (counts <= 0).any():
        missing = np.flatnonzero(counts <= 0).tolist()
        raise ValueError(
            f"classes {missing} have zero pixels; pass an explicit floor count "
            "(e.g. floor=1) to give them a finite weight"
        )
    freq = counts / counts.sum()
    raw = 1.0 / np.sqrt(freq)
    return ClassWeights(tuple(raw * (counts.size / raw.sum())))


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    num_classes: int
    ignore_index: int | None = None
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes,) * 2 or (self.counts < 0).any():
                raise ValueError("counts must be a non-negative C x C matrix")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(
            self.num_classes, self.ignore_index,
            self.counts + other.counts, self.ignored + other.ignored,
        )

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts.copy(), self.ignored)


def accumulate_confusion(cm: ConfusionMatrix, pred, target) -> ConfusionMatrix:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} shapes differ")
    pred, target = pred.ravel().astype(np.int64), target.ravel().astype(np.int64)
    keep = np.ones(target.shape, dtype=bool)
    if cm.ignore_index is not None:
        keep = target != cm.ignore_index
    n = cm.num_classes
    pred, target = pred[keep], target[keep]
    if ((pred < 0) | (pred >= n)).any() or ((target < 0) | (target >= n)).any():
        raise ValueError(f"class indices outside [0, {n})")
    counts = np.bincount(target * n + pred, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.ignore_index, cm.counts + counts, cm.ignored + int((~keep).sum()))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean; classes with empty union are NaN and skipped."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    return iou, float(np.nanmean(iou))


def binary_overlap_iou(logits, target) -> float:
    """Two-class mIoU of the argmax prediction against an overlap mask.

    Accepts a single ``(2, H, W)`` prediction or a batch ``(N, 2, H, W)``;
    batches are aggregated before the IoU is taken.
    """
    logits = torch.as_tensor(logits)
    mask = target.mask if isinstance(target, OverlapTarget) else np.asarray(target)
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        mask = mask[None]
    if logits.shape[1] != 2 or tuple(logits.shape[2:]) != tuple(mask.shape[-2:]) \
            or logits.shape[0] != mask.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {mask.shape}")
    pred = logits.argmax(dim=1).cpu().numpy()
    cm = accumulate_confusion(ConfusionMatrix(2), pred, mask)
    return miou(cm)[1]
