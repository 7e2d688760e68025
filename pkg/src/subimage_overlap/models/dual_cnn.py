"""Residual CNN encoders, the dual-encoder overlap model and a U-Net segmenter."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet

from .vit import IMAGENET_MEAN, IMAGENET_STD, ConvDecodeHead

RESNETS = {
    "resnet18": resnet.resnet18,
    "resnet34": resnet.resnet34,
    "resnet50": resnet.resnet50,
}


class ResNetEncoder(nn.Module):
    """torchvision ResNet without the classifier, exposing every stage.

    Stage strides are 2 (stem), 4, 8, 16 and 32. Parameter names match the
    torchvision layout so ImageNet state dicts load directly.
    """

    def __init__(self, depth: str = "resnet50"):
        super().__init__()
        if depth not in RESNETS:
            raise ValueError(f"unknown resnet depth {depth!r}; choose from {sorted(RESNETS)}")
        net = RESNETS[depth](weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = (
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        self.channels = (64,) + tuple(
            _out_channels(layer) for layer in (self.layer1, self.layer2, self.layer3, self.layer4)
        )
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1),
                             persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1),
                             persistent=False)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def stages(self, x):
        x = (x - self.pixel_mean) / self.pixel_std
        stem = self.relu(self.bn1(self.conv1(x)))
        c1 = self.layer1(self.maxpool(stem))
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [stem, c1, c2, c3, c4]

    def forward(self, x):
        return self.stages(x)[-1]


def _out_channels(layer) -> int:
    last = layer[-1]
    conv = getattr(last, "conv3", None) or last.conv2
    return conv.out_channels


class FusionBlock(nn.Module):
    """1x1 convolution halving the concatenated channels, then a 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.reduce = nn.Sequential(
            nn.Conv2d(in_channels, in_channels // 2, 1, bias=False),
            nn.BatchNorm2d(in_channels // 2),
            nn.ReLU(inplace=True),
        )
        self.mix = nn.Sequential(
            nn.Conv2d(in_channels // 2, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.mix(self.reduce(x))


class DualEncoderOverlapModel(nn.Module):
    """Separate encoders for full image and subimage, fused at stride 32.

    Subimage features are bilinearly resized to the full-image feature grid
    and concatenated along channels before fusion.
    """

    arch = "dual_cnn"

    def __init__(self, depth: str = "resnet50", fusion_channels: int | None = None,
                 num_classes: int = 2):
        super().__init__()
        self.full_encoder = ResNetEncoder(depth)
        self.sub_encoder = ResNetEncoder(depth)
        width = self.full_encoder.out_channels
        if self.sub_encoder.out_channels != width:
            raise ValueError("full and subimage encoders must share output width")
        fusion_channels = fusion_channels or max(width // 4, 8)
        self.fusion = FusionBlock(2 * width, fusion_channels)
        self.decode_head = ConvDecodeHead(fusion_channels, num_classes)

    def fused_features(self, full, sub):
        f_full = self.full_encoder(full)
        f_sub = self.sub_encoder(sub)
        f_sub = F.interpolate(f_sub, size=f_full.shape[-2:], mode="bilinear", align_corners=False)
        return self.fusion(torch.cat([f_full, f_sub], dim=1))

    def forward(self, full, sub):
        return self.decode_head(self.fused_features(full, sub), full.shape[-2:])


class DecoderBlock(nn.Module):
    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x, skip=None):
        size = skip.shape[-2:] if skip is not None else tuple(2 * s for s in x.shape[-2:])
        x = F.interpolate(x, size=size, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class UNet(nn.Module):
    """U-Net with a ResNet encoder and a freshly initialised decoder."""

    arch = "dual_cnn"

    def __init__(self, num_classes: int, depth: str = "resnet50",
                 decoder_channels=(256, 128, 64, 32, 16)):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.encoder = ResNetEncoder(depth)
        enc = self.encoder.channels
        skips = (enc[3], enc[2], enc[1], enc[0], 0)
        ins = (enc[4],) + tuple(decoder_channels[:-1])
        self.decoder = nn.ModuleList(
            DecoderBlock(i, s, o) for i, s, o in zip(ins, skips, decoder_channels)
        )
        self.head = nn.Conv2d(decoder_channels[-1], num_classes, 3, padding=1)

    def forward(self, images):
        stem, c1, c2, c3, c4 = self.encoder.stages(images)
        x = c4
        for block, skip in zip(self.decoder, (c3, c2, c1, stem, None)):
            x = block(x, skip)
        logits = self.head(x)
        if logits.shape[-2:] != images.shape[-2:]:
            logits = F.interpolate(logits, size=images.shape[-2:], mode="bilinear",
                                   align_corners=False)
        return logits
