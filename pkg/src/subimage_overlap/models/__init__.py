from .dual_cnn import DualEncoderOverlapModel, FusionBlock, ResNetEncoder, UNet
from .transfer import (
    ARCHS,
    LoadReport,
    ModelSpec,
    ParameterStore,
    build_downstream_segmenter,
    build_pretrain_model,
    export_encoder,
    load_external_encoder,
)
from .vit import (
    ConvDecodeHead,
    TokenSequence,
    ViTEncoder,
    ViTOverlapModel,
    ViTSegmenter,
    build_joint_sequence,
    joint_sequence_length,
    num_patches,
)

__all__ = [
    "ARCHS", "ConvDecodeHead", "DualEncoderOverlapModel", "FusionBlock", "LoadReport",
    "ModelSpec", "ParameterStore", "ResNetEncoder", "TokenSequence", "UNet", "ViTEncoder",
    "ViTOverlapModel", "ViTSegmenter", "build_downstream_segmenter", "build_joint_sequence",
    "build_pretrain_model", "export_encoder", "joint_sequence_length", "load_external_encoder",
    "num_patches",
]
