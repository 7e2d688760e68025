"""Vision transformer encoder and the joint-sequence overlap model.

Parameter names follow the DINOv2 layout (``patch_embed.proj``, ``pos_embed``,
``blocks.N.attn.qkv``, ``ls1.gamma`` ...) so released ViT checkpoints can be
loaded into :class:`ViTEncoder` by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SEGMENT_FULL, SEGMENT_SEP, SEGMENT_SUB = 0, 1, 2


@dataclass(frozen=True)
class TokenSequence:
    """Embedded tokens ``(N, L, D)`` plus a segment id per position."""

    tokens: torch.Tensor
    layout: torch.Tensor
    full_grid: tuple[int, int]
    sub_grid: tuple[int, int]

    def __len__(self) -> int:
        return self.tokens.shape[1]

    @property
    def sep_index(self) -> int:
        return self.full_grid[0] * self.full_grid[1]

    def segment(self, which: int) -> torch.Tensor:
        return self.tokens[:, self.layout == which]


def num_patches(height: int, width: int, patch_size: int) -> int:
    check_divisible(height, width, patch_size)
    return (height // patch_size) * (width // patch_size)


def joint_sequence_length(image_dims, sub_dims, patch_size: int) -> int:
    return num_patches(*image_dims, patch_size) + 1 + num_patches(*sub_dims, patch_size)


def check_divisible(height: int, width: int, patch_size: int) -> None:
    if height % patch_size or width % patch_size:
        raise ValueError(f"input {height}x{width} is not divisible by patch size {patch_size}")


def resize_pos_table(table: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Bicubically resample a square ``(1, g*g, D)`` table onto ``grid``."""
    n, dim = table.shape[1], table.shape[2]
    side = int(math.isqrt(n))
    if side * side != n:
        raise ValueError(f"position table with {n} entries is not a square grid")
    if (side, side) == tuple(grid):
        return table
    square = table.reshape(1, side, side, dim).permute(0, 3, 1, 2)
    square = F.interpolate(square.float(), size=grid, mode="bicubic", align_corners=False)
    return square.to(table.dtype).permute(0, 2, 3, 1).reshape(1, grid[0] * grid[1], dim)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        check_divisible(x.shape[-2], x.shape[-1], self.patch_size)
        x = self.proj(x)
        grid = tuple(x.shape[-2:])
        return x.flatten(2).transpose(1, 2), grid


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, length, dim = x.shape
        qkv = self.qkv(x).reshape(n, length, 3, self.num_heads, dim // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        x = F.scaled_dot_product_attention(q, k, v)
        return self.proj(x.transpose(1, 2).reshape(n, length, dim))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init)))

    def forward(self, x):
        return x * self.gamma


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, layerscale: float = 1.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim, layerscale)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim, layerscale)

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        return x + self.ls2(self.mlp(self.norm2(x)))


class ViTEncoder(nn.Module):
    """Patch embedding, learned positional table and pre-norm transformer blocks.

    No class token is used. The positional table covers a ``pos_grid`` x
    ``pos_grid`` patch grid and is resampled for any other grid.
    """

    def __init__(self, patch_size=14, dim=384, depth=12, num_heads=6, pos_grid=16,
                 mlp_ratio=4.0, layerscale=1.0):
        super().__init__()
        self.patch_size = patch_size
        self.dim = dim
        self.patch_embed = PatchEmbed(patch_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, pos_grid * pos_grid, dim))
        self.blocks = nn.ModuleList(
            Block(dim, num_heads, mlp_ratio, layerscale) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1),
                             persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1),
                             persistent=False)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_weights)

    def patch_tokens(self, images):
        """Patch tokens before positional encoding, and their grid."""
        return self.patch_embed((images - self.pixel_mean) / self.pixel_std)

    def add_positions(self, tokens, grid):
        return tokens + resize_pos_table(self.pos_embed, grid)

    def embed(self, images):
        tokens, grid = self.patch_tokens(images)
        return self.add_positions(tokens, grid), grid

    def encode(self, tokens):
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def forward(self, images):
        """Feature map ``(N, D, H/P, W/P)`` of a batch of images."""
        tokens, grid = self.embed(images)
        return tokens_to_map(self.encode(tokens), grid)


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def tokens_to_map(tokens, grid):
    n, length, dim = tokens.shape
    if length != grid[0] * grid[1]:
        raise ValueError(f"{length} tokens cannot fill a {grid} grid")
    return tokens.transpose(1, 2).reshape(n, dim, grid[0], grid[1])


def build_joint_sequence(full_tokens, sub_tokens, sep, full_grid=None, sub_grid=None):
    """Concatenate ``[full; SEP; sub]`` along the sequence axis."""
    if full_tokens.dim() == 2:
        full_tokens, sub_tokens = full_tokens.unsqueeze(0), sub_tokens.unsqueeze(0)
    dim = full_tokens.shape[-1]
    if sub_tokens.shape[-1] != dim or sep.shape[-1] != dim:
        raise ValueError(
            f"embedding dims differ: full {dim}, sub {sub_tokens.shape[-1]}, sep {sep.shape[-1]}"
        )
    if sub_tokens.shape[0] != full_tokens.shape[0]:
        raise ValueError("full and subimage batches differ in size")
    n = full_tokens.shape[0]
    sep = sep.reshape(1, 1, dim).expand(n, 1, dim)
    tokens = torch.cat([full_tokens, sep, sub_tokens], dim=1)
    n_full, n_sub = full_tokens.shape[1], sub_tokens.shape[1]
    layout = torch.cat([
        torch.full((n_full,), SEGMENT_FULL),
        torch.full((1,), SEGMENT_SEP),
        torch.full((n_sub,), SEGMENT_SUB),
    ])
    full_grid = full_grid or _square(n_full)
    sub_grid = sub_grid or _square(n_sub)
    return TokenSequence(tokens, layout, tuple(full_grid), tuple(sub_grid))


def _square(n):
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


class ConvDecodeHead(nn.Module):
    """Two 3x3 convolutions (C -> C/2 -> classes) and bilinear upsampling."""

    def __init__(self, in_channels: int, num_classes: int = 2, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(in_channels // 2, 1)
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.act = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(hidden, num_classes, 3, padding=1)

    def forward(self, features, size):
        logits = self.conv2(self.act(self.conv1(features)))
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class ViTOverlapModel(nn.Module):
    """Predicts where a subimage sits inside a full image.

    Both inputs are embedded separately (each with its own positional
    grid), joined as ``[full; SEP; sub]`` and encoded together. Only the
    full-image output tokens are decoded.
    """

    arch = "vit"

    def __init__(self, patch_size=14, dim=384, depth=12, num_heads=6, pos_grid=16,
                 mlp_ratio=4.0, layerscale=1.0, num_classes=2):
        super().__init__()
        self.encoder = ViTEncoder(patch_size, dim, depth, num_heads, pos_grid, mlp_ratio, layerscale)
        self.sep_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.sep_token, std=0.02)
        self.decode_head = ConvDecodeHead(dim, num_classes)

    def joint_sequence(self, full, sub, sub_order=None) -> TokenSequence:
        """Embed both images and join them.

        ``sub_order`` optionally permutes the subimage patch tokens before
        positions are added (a probe for position sensitivity).
        """
        full_tokens, full_grid = self.encoder.embed(full)
        sub_tokens, sub_grid = self.encoder.patch_tokens(sub)
        if sub_order is not None:
            sub_tokens = sub_tokens[:, sub_order]
        sub_tokens = self.encoder.add_positions(sub_tokens, sub_grid)
        return build_joint_sequence(full_tokens, sub_tokens, self.sep_token, full_grid, sub_grid)

    def forward(self, full, sub, sub_order=None):
        seq = self.joint_sequence(full, sub, sub_order)
        out = self.encoder.encode(seq.tokens)
        n_full = seq.full_grid[0] * seq.full_grid[1]
        features = tokens_to_map(out[:, :n_full], seq.full_grid)
        return self.decode_head(features, full.shape[-2:])


class ViTSegmenter(nn.Module):
    """Downstream segmentation: ViT encoder on the image alone plus a conv head."""

    arch = "vit"

    def __init__(self, num_classes, patch_size=14, dim=384, depth=12, num_heads=6, pos_grid=16,
                 mlp_ratio=4.0, layerscale=1.0):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.encoder = ViTEncoder(patch_size, dim, depth, num_heads, pos_grid, mlp_ratio, layerscale)
        self.decode_head = ConvDecodeHead(dim, num_classes)

    def forward(self, images):
        return self.decode_head(self.encoder(images), images.shape[-2:])
