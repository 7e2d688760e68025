"""Named parameter stores and encoder transfer between pretext and downstream models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from types import MappingProxyType

import torch
import torch.nn as nn

from .dual_cnn import DualEncoderOverlapModel, UNet
from .vit import ViTOverlapModel, ViTSegmenter, resize_pos_table

ARCHS = ("vit", "dual_cnn")
PROVENANCES = ("subimage-pretrained", "imagenet", "lvd142m", "random", "external")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters shared by pretext and downstream models."""

    arch: str = "vit"
    patch_size: int = 14
    dim: int = 384
    depth: int = 12
    num_heads: int = 6
    pos_grid: int = 16
    mlp_ratio: float = 4.0
    layerscale: float = 1.0
    cnn_depth: str = "resnet50"
    fusion_channels: int | None = None

    def __post_init__(self):
        check_arch(self.arch)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def vit_kwargs(self) -> dict:
        return dict(patch_size=self.patch_size, dim=self.dim, depth=self.depth,
                    num_heads=self.num_heads, pos_grid=self.pos_grid,
                    mlp_ratio=self.mlp_ratio, layerscale=self.layerscale)


def check_arch(arch: str) -> str:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    return arch


@dataclass(frozen=True)
class LoadReport:
    loaded: tuple[str, ...] = ()
    missing: tuple[str, ...] = ()
    unconsumed: tuple[str, ...] = ()
    mismatched: tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not (self.unconsumed or self.mismatched)


@dataclass(frozen=True, eq=False)
class ParameterStore:
    """Read-only mapping from dotted parameter path to tensor, with provenance."""

    tensors: dict
    arch: str
    provenance: str = "random"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        check_arch(self.arch)
        frozen = {str(k): v.detach().clone() for k, v in self.tensors.items()}
        object.__setattr__(self, "tensors", MappingProxyType(frozen))
        object.__setattr__(self, "model", dict(self.model))

    @classmethod
    def from_module(cls, module: nn.Module, arch: str, provenance: str, model: ModelSpec | dict):
        spec = asdict(model) if isinstance(model, ModelSpec) else dict(model)
        return cls(module.state_dict(), arch, provenance, spec)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict({**self.model, "arch": self.arch})

    def __len__(self):
        return len(self.tensors)

    def __contains__(self, name):
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def load_into(self, module: nn.Module) -> LoadReport:
        """Copy every name/shape-compatible tensor into ``module``."""
        target = module.state_dict()
        loaded, mismatched = [], []
        for name, tensor in self.tensors.items():
            if name not in target:
                continue
            if target[name].shape != tensor.shape:
                mismatched.append(name)
                continue
            loaded.append(name)
        module.load_state_dict({n: self.tensors[n] for n in loaded}, strict=False)
        return LoadReport(
            loaded=tuple(sorted(loaded)),
            missing=tuple(sorted(set(target) - set(loaded) - set(mismatched))),
            unconsumed=tuple(sorted(set(self.tensors) - set(target))),
            mismatched=tuple(sorted(mismatched)),
        )


def build_pretrain_model(spec: ModelSpec) -> nn.Module:
    if spec.arch == "vit":
        return ViTOverlapModel(**spec.vit_kwargs())
    return DualEncoderOverlapModel(spec.cnn_depth, spec.fusion_channels)


def export_encoder(params: ParameterStore, arch: str) -> ParameterStore:
    """Keep only the parts of a pretext model that transfer downstream.

    ``vit`` keeps the shared encoder (patch embedding, positions, blocks) and
    drops the separator token and decode head. ``dual_cnn`` keeps only the
    full-image encoder, renamed into the ``encoder.`` namespace.
    """
    check_arch(arch)
    if params.arch != arch:
        raise ValueError(f"parameters are for {params.arch!r}, not {arch!r}")
    if arch == "vit":
        kept = {k: v for k, v in params.tensors.items() if k.startswith("encoder.")}
    else:
        prefix = "full_encoder."
        kept = {"encoder." + k[len(prefix):]: v
                for k, v in params.tensors.items() if k.startswith(prefix)}
    if not kept:
        raise ValueError("no encoder parameters found to export")
    return ParameterStore(kept, arch, "subimage-pretrained", params.model)


def build_downstream_segmenter(encoder: ParameterStore | None, arch: str, num_classes: int,
                               model: ModelSpec | None = None) -> nn.Module:
    """Segmentation model whose encoder is initialised from ``encoder``.

    With ``encoder=None`` everything is freshly initialised from ``model``.
    All parameters are left trainable.
    """
    check_arch(arch)
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if encoder is not None and encoder.arch != arch:
        raise ValueError(f"encoder weights are for {encoder.arch!r}, model is {arch!r}")
    spec = model or (encoder.spec if encoder is not None else ModelSpec(arch=arch))
    if spec.arch != arch:
        spec = ModelSpec.from_dict({**asdict(spec), "arch": arch})
    if arch == "vit":
        net = ViTSegmenter(num_classes, **spec.vit_kwargs())
    else:
        net = UNet(num_classes, spec.cnn_depth)
    if encoder is not None:
        report = encoder.load_into(net)
        if report.mismatched or report.unconsumed:
            raise ValueError(
                f"encoder weights do not fit the {arch} segmenter: "
                f"mismatched={list(report.mismatched)[:5]} unconsumed={list(report.unconsumed)[:5]}"
            )
        net.transfer_report = report
    for p in net.parameters():
        p.requires_grad_(True)
    return net


_DROP_EXTERNAL = ("cls_token", "mask_token", "register_tokens", "fc.weight", "fc.bias", "head.")


def load_external_encoder(path, arch: str, spec: ModelSpec, provenance: str) -> ParameterStore:
    """Import released encoder weights (DINOv2 ViT or torchvision ResNet state dict).

    Class/mask tokens and classifier weights are dropped. A DINOv2 position
    table (with its class-token slot) is resampled onto ``spec.pos_grid``.
    """
    check_arch(arch)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"external weights not found: {path}")
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file
        raw = load_file(str(path))
    else:
        raw = torch.load(path, map_location="cpu", weights_only=True)
        raw = raw.get("state_dict", raw.get("model", raw)) if isinstance(raw, dict) else raw
    tensors = {}
    for name, value in raw.items():
        name = name.removeprefix("module.").removeprefix("backbone.").removeprefix("encoder.")
        if any(name.startswith(d) for d in _DROP_EXTERNAL):
            continue
        if name == "pos_embed" and arch == "vit":
            value = _adapt_pos_table(value, spec.pos_grid)
        tensors["encoder." + name] = value
    return ParameterStore(tensors, arch, provenance, asdict(spec))


def _adapt_pos_table(table: torch.Tensor, grid: int) -> torch.Tensor:
    n = table.shape[1]
    side = int(n ** 0.5)
    if side * side != n:
        table = table[:, 1:]
    return resize_pos_table(table, (grid, grid)).contiguous()
