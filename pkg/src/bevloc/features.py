"""Rotation-equivariant BEV feature extraction.

Max feature aggregation (MFA) over a closed set of input rotations, a
conv-stem vision transformer and a gated global-average-pooling head.
Tensors are channel-first (``B, C, H, W``) internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class FeatureNetConfig:
    rotation_count: int = 8
    image_side: int = 128
    backbone_widths: tuple[int, ...] = (32, 64, 128, 128)
    patch_size: int = 4
    vit_dim: int = 256
    vit_depth: int = 6
    vit_heads: int = 4
    vit_mlp_ratio: int = 2
    output_dim: int = 512
    use_mfa: bool = True
    bias: bool = True
    norm: str = "batch"  # "batch" or "channel" (per-pixel LayerNorm over channels)

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if self.rotation_count < 1:
            raise ValueError("rotation_count must be >= 1")
        if len(self.backbone_widths) != 4:
            raise ValueError("backbone expects exactly 4 block widths")
        if self.image_side % 4:
            raise ValueError("image_side must be divisible by 4")
        h, _, _ = self.mfa_shape
        if h % self.patch_size:
            raise ValueError(f"feature side {h} not divisible by patch size {self.patch_size}")
        if self.vit_dim % self.vit_heads:
            raise ValueError("vit_dim must be divisible by vit_heads")
        if self.vit_dim % 2:
            raise ValueError("vit_dim must be even")
        if self.norm not in ("batch", "channel"):
            raise ValueError(f"norm must be 'batch' or 'channel', got {self.norm!r}")

    @property
    def mfa_shape(self) -> tuple[int, int, int]:
        side = self.image_side // 4
        return side, side, self.backbone_widths[-1]

    @property
    def token_count(self) -> int:
        h, w, _ = self.mfa_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def rotations(self) -> list[float]:
        n = self.rotation_count if self.use_mfa else 1
        return [2 * math.pi * i / n for i in range(n)]


def _quarter_turns(angle: float) -> int | None:
    q = angle / (math.pi / 2)
    k = round(q)
    if abs(q - k) < 1e-9:
        return k % 4
    return None


def rotate_image(img: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate the trailing two (square) dims CCW by ``angle`` about the image center.

    Multiples of 90 degrees are exact pixel permutations; other angles use
    bilinear sampling with zero fill.
    """
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"rotate_image needs square spatial dims, got {tuple(img.shape[-2:])}")
    k = _quarter_turns(angle)
    if k is not None:
        return torch.rot90(img, k, dims=(-2, -1)) if k else img
    lead = img.shape[:-2]
    x = img.reshape(-1, 1, *img.shape[-2:])
    c, s = math.cos(angle), math.sin(angle)
    theta = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=img.dtype, device=img.device)
    grid = F.affine_grid(theta.expand(x.shape[0], 2, 3), list(x.shape), align_corners=True)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.reshape(*lead, *img.shape[-2:])


class ChannelNorm(nn.Module):
    """LayerNorm over channels at every pixel (keeps the backbone spatially local)."""

    def __init__(self, channels: int, bias: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels)) if bias else None

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        xc = x - mu
        var = (xc * xc).mean(dim=1, keepdim=True)
        out = xc * torch.rsqrt(var + self.eps) * self.weight[:, None, None]
        if self.bias is not None:
            out = out + self.bias[:, None, None]
        return out


def make_norm(kind: str, channels: int, bias: bool = True) -> nn.Module:
    # batch statistics keep descriptors from collapsing to a constant early in training;
    # in eval mode both kinds are pointwise, so locality and equivariance are unaffected
    if kind == "batch":
        return nn.BatchNorm2d(channels, affine=bias)
    return ChannelNorm(channels, bias)


class PreActBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, bias: bool = True, norm: str = "batch"):
        super().__init__()
        self.norm1 = make_norm(norm, cin, bias)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=bias)
        self.norm2 = make_norm(norm, cout, bias)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=bias)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, 0, bias=bias)

    def forward(self, x):
        h = F.gelu(self.norm1(x))
        skip = x if self.shortcut is None else self.shortcut(h)
        h = self.conv1(h)
        h = self.conv2(F.gelu(self.norm2(h)))
        return skip + h


class Backbone(nn.Module):
    """Four pre-activation residual blocks; the first two halve the resolution."""

    def __init__(self, widths=(32, 64, 128, 128), bias: bool = True, norm: str = "batch"):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Conv2d(1, w0, 3, 1, 1, bias=bias)
        self.blocks = nn.Sequential(
            PreActBlock(w0, w1, 2, bias, norm),
            PreActBlock(w1, w2, 2, bias, norm),
            PreActBlock(w2, w2, 1, bias, norm),
            PreActBlock(w2, w3, 1, bias, norm),
        )
        self.out_norm = make_norm(norm, w3, bias)

    def forward(self, x):
        return F.gelu(self.out_norm(self.blocks(self.stem(x))))


class MFA(nn.Module):
    """Shared backbone on every rotated copy, rotated back, elementwise max."""

    def __init__(self, cfg: FeatureNetConfig):
        super().__init__()
        self.angles = cfg.rotations
        self.backbone = Backbone(cfg.backbone_widths, cfg.bias, cfg.norm)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim == 3:
            img = img.unsqueeze(1)
        if len(self.angles) == 1:
            return self.backbone(img)
        b = img.shape[0]
        rotated = torch.cat([rotate_image(img, a) for a in self.angles], dim=0)
        feats = self.backbone(rotated).split(b, dim=0)
        back = [rotate_image(f, -a) for f, a in zip(feats, self.angles)]
        return torch.stack(back, dim=0).amax(dim=0)


class PatchConvStem(nn.Module):
    """Non-linear patch embedding: two 3x3 stride-2 convs + 1x1 projection.

    Applied to each ``patch x patch`` tile independently so every token only
    sees its own tile.
    """

    def __init__(self, cin: int, dim: int, patch: int = 4, bias: bool = True, norm: str = "batch"):
        super().__init__()
        if patch != 4:
            raise ValueError("the conv stem is built for 4x4 patches")
        self.patch = patch
        mid = max(dim // 2, 1)
        self.conv1 = nn.Conv2d(cin, mid, 3, 2, 1, bias=bias)
        self.norm1 = make_norm(norm, mid, bias)
        self.conv2 = nn.Conv2d(mid, dim, 3, 2, 1, bias=bias)
        self.norm2 = make_norm(norm, dim, bias)
        self.proj = nn.Conv2d(dim, dim, 1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        p = self.patch
        gh, gw = h // p, w // p
        tiles = x.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(-1, c, p, p)
        t = F.gelu(self.norm1(self.conv1(tiles)))
        t = F.gelu(self.norm2(self.conv2(t)))
        t = self.proj(t)
        return t.reshape(b, gh * gw, -1)


class ViTEncoder(nn.Module):
    def __init__(self, cfg: FeatureNetConfig):
        super().__init__()
        h, w, c = cfg.mfa_shape
        self.input_shape = (c, h, w)
        self.stem = PatchConvStem(c, cfg.vit_dim, cfg.patch_size, cfg.bias, cfg.norm)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_count, cfg.vit_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(
            cfg.vit_dim, cfg.vit_heads, cfg.vit_mlp_ratio * cfg.vit_dim,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.vit_depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.vit_dim)

    def tokens(self, f: torch.Tensor) -> torch.Tensor:
        """Stem tokens before the positional embedding is added."""
        if tuple(f.shape[1:]) != self.input_shape:
            raise ValueError(f"ViT expects (B, {self.input_shape}) input, got {tuple(f.shape)}")
        return self.stem(f)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        t = self.tokens(f) + self.pos_embed
        return self.norm(self.encoder(t))


class GlobalHead(nn.Module):
    """``GAP(F + sigmoid(FC(F)) * F)`` followed by a linear projection."""

    def __init__(self, dim: int, output_dim: int):
        super().__init__()
        self.gate = nn.Linear(dim, 1)
        self.proj = nn.Linear(dim, output_dim)

    def gates(self, tokens):
        return torch.sigmoid(self.gate(tokens))

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        return (tokens + self.gates(tokens) * tokens).mean(dim=-2)

    def forward(self, tokens):
        return self.proj(self.pool(tokens))


class FeatureNet(nn.Module):
    """BEV image batch ``(B, S, S)`` -> global descriptors ``(B, output_dim)``."""

    def __init__(self, cfg: FeatureNetConfig = FeatureNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.mfa = MFA(cfg)
        self.vit = ViTEncoder(cfg)
        self.head = GlobalHead(cfg.vit_dim, cfg.output_dim)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-1] != self.cfg.image_side or img.shape[-2] != self.cfg.image_side:
            raise ValueError(
                f"expected {self.cfg.image_side}x{self.cfg.image_side} images, got {tuple(img.shape)}"
            )
        return self.head(self.vit(self.mfa(img)))
