"""Toy four-stage backbones (CNN and transformer) with per-stage hook points.

Stage outputs sit at 1/4, 1/8, 1/16 and 1/32 of the input resolution. A
``hook(i, f)`` callable, when given, replaces stage ``i``'s output before the
next stage consumes it; that is where distortion features get embedded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .embedding import EmbeddingFeatureSet

CNN_DIMS = (16, 32, 64, 128)
TRANSFORMER_DIMS = (24, 48, 96, 192)
STAGE_STRIDES = (4, 8, 16, 32)
NUM_CLASSES = 10


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    stage_dims: tuple

    def __post_init__(self):
        if self.family not in ("cnn", "transformer"):
            raise ValueError(f"unknown backbone family {self.family!r}")
        dims = tuple(self.stage_dims)
        if len(dims) != 4 or any(d <= 0 for d in dims) or list(dims) != sorted(dims):
            raise ValueError(f"stage_dims must be 4 positive nondecreasing ints, got {dims}")
        object.__setattr__(self, "stage_dims", dims)

    @property
    def stage_strides(self):
        return STAGE_STRIDES

    @classmethod
    def default(cls, family):
        return cls(family, CNN_DIMS if family == "cnn" else TRANSFORMER_DIMS)


def _conv(a, b, stride):
    # per-channel GroupNorm rather than BatchNorm: no running statistics, so a
    # frozen backbone is a pure function of its parameters. Per-channel
    # centering also keeps faint texture from drowning in flat-colour offsets.
    return nn.Sequential(nn.Conv2d(a, b, 3, stride=stride, padding=1, bias=False), nn.GroupNorm(b, b), nn.ReLU())


class ToyCNN(nn.Module):
    family = "cnn"

    def __init__(self, stage_dims=CNN_DIMS):
        super().__init__()
        self.stage_dims = tuple(stage_dims)
        d = self.stage_dims
        # full-resolution stem: a strided first conv aliases 2-pixel texture away
        self.stages = nn.ModuleList(
            [nn.Sequential(_conv(3, d[0] // 2, 1), _conv(d[0] // 2, d[0], 2), _conv(d[0], d[0], 2))]
            + [nn.Sequential(_conv(a, b, 2), _conv(b, b, 1)) for a, b in zip(d[:-1], d[1:])]
        )

    def forward(self, x, hook=None):
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if hook is not None:
                x = hook(i, x)
            feats.append(x)
        return feats

    def pool(self, f):
        return f.mean(dim=(2, 3))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads=2, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat then linear, halving the token grid."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * in_dim)
        self.reduce = nn.Linear(4 * in_dim, out_dim, bias=False)

    def forward(self, x, grid):
        b, _, c = x.shape
        gh, gw = grid
        x = x.view(b, gh, gw, c).permute(0, 3, 1, 2)
        x = F.pad(x, (0, gw % 2, 0, gh % 2))
        x = F.pixel_unshuffle(x, 2)  # [b, 4c, gh/2, gw/2]
        grid = (x.shape[2], x.shape[3])
        x = x.flatten(2).transpose(1, 2)
        return self.reduce(self.norm(x)), grid


class ToyTransformer(nn.Module):
    family = "transformer"

    def __init__(self, stage_dims=TRANSFORMER_DIMS, patch=4, blocks_per_stage=2, heads=2, image_size=64):
        super().__init__()
        self.stage_dims = tuple(stage_dims)
        d = self.stage_dims
        self.patch = nn.Conv2d(3, d[0], patch, stride=patch)
        g = image_size // patch
        self.pos = nn.Parameter(torch.zeros(1, d[0], g, g))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.merges = nn.ModuleList([nn.Identity()] + [PatchMerge(a, b) for a, b in zip(d[:-1], d[1:])])
        self.stages = nn.ModuleList(
            nn.Sequential(*(TransformerBlock(c, heads) for _ in range(blocks_per_stage))) for c in d
        )
        self.norm = nn.LayerNorm(d[-1])

    def forward(self, x, hook=None):
        # per-image, per-channel standardization: without it every patch token
        # shares one large colour offset and LayerNorm flattens the rest
        x = self.patch(F.instance_norm(x, eps=1e-5))
        pos = self.pos
        if pos.shape[-2:] != x.shape[-2:]:
            pos = F.interpolate(pos, size=x.shape[-2:], mode="bilinear", align_corners=False)
        x = x + pos
        grid = (x.shape[2], x.shape[3])
        x = x.flatten(2).transpose(1, 2)
        feats = []
        for i, (merge, stage) in enumerate(zip(self.merges, self.stages)):
            if i:
                x, grid = merge(x, grid)
            x = stage(x)
            if hook is not None:
                x = hook(i, x)
            feats.append(x)
        return feats

    def pool(self, f):
        return self.norm(f).mean(dim=1)


def build_backbone(spec: BackboneSpec, image_size=64):
    if spec.family == "cnn":
        return ToyCNN(spec.stage_dims)
    return ToyTransformer(spec.stage_dims, image_size=image_size)


class Downstream(nn.Module):
    """Backbone plus linear classification head."""

    def __init__(self, spec: BackboneSpec, num_classes=NUM_CLASSES, image_size=64):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec, image_size)
        self.head = nn.Linear(spec.stage_dims[-1], num_classes)

    @property
    def family(self):
        return self.spec.family

    def forward(self, x, hook=None):
        feats = self.backbone(x, hook)
        return feats, self.head(self.backbone.pool(feats[-1]))


def embedding_hook(embeddings: EmbeddingFeatureSet, embed: nn.ModuleList):
    """Hook applying ``embed[i](f_i, d_i)`` for every available ``d_i``."""

    def hook(i, f):
        if i < len(embeddings.features):
            return embed[i](f, embeddings.features[i])
        return f

    return hook


def backbone_forward(model: Downstream, image, embeddings: EmbeddingFeatureSet | None = None, embed=None):
    """Stage features and logits; embeds ``embeddings`` when given.

    ``image`` may be ``[3, H, W]`` or batched.
    """
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    if min(x.shape[-2:]) < 32:
        raise ValueError(f"image dims must be >= 32, got {tuple(x.shape[-2:])}")
    hook = None
    if embeddings is not None:
        if embeddings.family != model.family:
            raise ValueError(
                f"embedding variant {embeddings.family!r} does not match backbone family {model.family!r}"
            )
        if embed is None:
            raise ValueError("embeddings given without embed modules")
        if not batched:
            embeddings = EmbeddingFeatureSet(embeddings.family, [d.unsqueeze(0) for d in embeddings.features])
        hook = embedding_hook(embeddings, embed)
    feats, logits = model(x, hook)
    if not batched:
        feats, logits = [f[0] for f in feats], logits[0]
    return feats, logits


def stage_shapes(spec: BackboneSpec, h=64, w=64):
    """Declared per-stage output shapes for an ``h x w`` input (unbatched)."""
    out = []
    for c, s in zip(spec.stage_dims, STAGE_STRIDES):
        sh, sw = math.ceil(h / s), math.ceil(w / s)
        out.append((c, sh, sw) if spec.family == "cnn" else (sh * sw, c))
    return out
