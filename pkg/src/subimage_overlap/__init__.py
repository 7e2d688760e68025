"""Subimage overlap prediction: a self-supervised pretext task for segmentation."""

from .core import (
    ImageSample,
    InvariantError,
    OverlapTarget,
    SegmentationSample,
    SplitAssignment,
    SubimageSpec,
    ValidationReport,
    validate_sample,
)
from .task import (
    AugmentationConfig,
    PretrainExample,
    assemble_pretrain_example,
    make_overlap_mask,
    select_subimage,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "ImageSample", "InvariantError", "OverlapTarget", "PretrainExample",
    "SegmentationSample", "SplitAssignment", "SubimageSpec", "ValidationReport",
    "assemble_pretrain_example", "make_overlap_mask", "select_subimage", "validate_sample",
]
