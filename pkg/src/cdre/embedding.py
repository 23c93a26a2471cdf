"""Progressive transformation of decoded distortion features and their
residual embedding into backbone stages.

CNN backbones get ``d_i = ReLU(Norm(Conv(d_{i-1})))`` followed by a
spatial-then-channel attention branch added to the stage output. Transformer
backbones get a one-hidden-layer MLP per stage and a cross-attention branch
whose queries come from the stage tokens. Every branch ends in a
zero-initialized projection, so an untrained embedder leaves the backbone
output unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

FAMILIES = ("cnn", "transformer")
MAX_DEPTH = 4


@dataclass
class EmbeddingFeatureSet:
    """Transformed distortion features ``d_1..d_depth`` for one backbone family."""

    family: str
    features: list = field(default_factory=list)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")
        if len(self.features) > MAX_DEPTH:
            raise ValueError(f"at most {MAX_DEPTH} embedding features, got {len(self.features)}")

    def __len__(self):
        return len(self.features)


def check_depth(depth: int) -> int:
    if isinstance(depth, bool) or int(depth) != depth or not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"embedding depth must be an integer in [1, {MAX_DEPTH}], got {depth!r}")
    return int(depth)


# --- CNN variant ------------------------------------------------------------


class CNNTransform(nn.Module):
    """Stride-matched conv blocks: 1/4 scale at stage 1, then x1/2 per stage."""

    def __init__(self, stage_dims, in_channels=8, first_stride=4):
        super().__init__()
        self.stage_dims = tuple(stage_dims)
        chans = (in_channels,) + self.stage_dims
        self.blocks = nn.ModuleList()
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(a, b, 3, stride=first_stride if i == 0 else 2, padding=1, bias=False),
                    nn.GroupNorm(1, b),
                    nn.ReLU(),
                )
            )

    def step(self, i, d_prev):
        expected = self.blocks[i][0].in_channels
        if d_prev.shape[-3] != expected:
            raise ValueError(f"stage {i + 1} transform expects {expected} channels, got {d_prev.shape[-3]}")
        return self.blocks[i](d_prev)

    def forward(self, d0, depth=MAX_DEPTH):
        out, d = [], d0
        for i in range(check_depth(depth)):
            d = self.step(i, d)
            out.append(d)
        return out


class SpatialChannelEmbed(nn.Module):
    """``f + Proj(CA(SA(f, d)))`` with CBAM-style spatial and channel gates.

    The spatial gate is computed from channel-mean and channel-max maps of
    ``cat(f, d)`` and applied to ``d``; the channel gate squeezes the gated
    ``d`` through a bottleneck. ``Proj`` is a zero-initialized 1x1 conv.
    """

    def __init__(self, channels, reduction=4, kernel_size=7):
        super().__init__()
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        hidden = max(1, channels // reduction)
        self.channel = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def branch(self, f, d):
        if f.shape != d.shape:
            raise ValueError(f"stage/distortion shape mismatch: {tuple(f.shape)} vs {tuple(d.shape)}")
        both = torch.cat([f, d], dim=1)
        pooled = torch.cat([both.mean(dim=1, keepdim=True), both.amax(dim=1, keepdim=True)], dim=1)
        s = d * torch.sigmoid(self.spatial(pooled))
        gate = torch.sigmoid(self.channel(s.mean(dim=(2, 3))))
        return self.proj(s * gate[:, :, None, None])

    def forward(self, f, d):
        return f + self.branch(f, d)


# --- transformer variant ------------------------------------------------------


class TokenMLP(nn.Module):
    """Per-token MLP with one ReLU hidden layer."""

    def __init__(self, in_dim, out_dim, hidden=None):
        super().__init__()
        hidden = hidden or 2 * max(in_dim, out_dim)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"token dim {x.shape[-1]} != expected {self.fc1.in_features}")
        return self.fc2(F.relu(self.fc1(x)))


class TokenTransform(nn.Module):
    def __init__(self, stage_dims, in_dim=None):
        super().__init__()
        self.stage_dims = tuple(stage_dims)
        dims = (in_dim or self.stage_dims[0],) + self.stage_dims
        self.mlps = nn.ModuleList(TokenMLP(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def step(self, i, d_prev):
        return self.mlps[i](d_prev)

    def forward(self, d0, depth=MAX_DEPTH):
        out, d = [], d0
        for i in range(check_depth(depth)):
            d = self.step(i, d)
            out.append(d)
        return out


class CrossAttentionEmbed(nn.Module):
    """``f + Proj(softmax(Q K^T / sqrt(d)) V)`` with Q from stage tokens, K/V from distortion tokens."""

    def __init__(self, dim, heads=2):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def attention(self, f, d):
        """Attention weights ``[B, heads, N_f, N_d]``."""
        if f.shape[-1] != self.dim or d.shape[-1] != self.dim:
            raise ValueError(f"token dims {f.shape[-1]}/{d.shape[-1]} != embed dim {self.dim}")
        q, k = self._split(self.q(f)), self._split(self.k(d))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.dim // self.heads), dim=-1)

    def branch(self, f, d):
        attn = self.attention(f, d)
        mixed = (attn @ self._split(self.v(d))).transpose(1, 2).reshape(f.shape)
        return self.proj(mixed)

    def forward(self, f, d):
        return f + self.branch(f, d)


def build_transform(family, stage_dims, decoded_channels=8):
    if family == "cnn":
        return CNNTransform(stage_dims, in_channels=decoded_channels)
    if family == "transformer":
        return TokenTransform(stage_dims)
    raise ValueError(f"unknown backbone family {family!r}")


def build_embed(family, stage_dims, heads=2):
    if family == "cnn":
        return nn.ModuleList(SpatialChannelEmbed(c) for c in stage_dims)
    if family == "transformer":
        return nn.ModuleList(CrossAttentionEmbed(c, heads) for c in stage_dims)
    raise ValueError(f"unknown backbone family {family!r}")
