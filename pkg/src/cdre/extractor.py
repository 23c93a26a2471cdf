"""Compression-sensitive feature extractor and feature-domain distortion."""

from __future__ import annotations

import torch
from torch import nn

EXTRACTOR_CHANNELS = (8, 16, 24)
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01
COSINE_EPS = 1e-8


class ExtractionBlock(nn.Module):
    """Stride-2 3x3 conv -> instance norm -> leaky ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        # bias is cancelled by the normalization that follows
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.norm = nn.InstanceNorm2d(out_ch, eps=NORM_EPS, affine=False)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class SensitiveExtractor(nn.Module):
    """Three extraction blocks shared between original and compressed inputs.

    ``forward`` returns a list of three feature maps at 1/2, 1/4 and 1/8 of
    the input resolution. With ``multi_scale=False`` only the first level is
    returned (used by the extractor ablation).
    """

    def __init__(self, channels=EXTRACTOR_CHANNELS, in_channels=3, multi_scale=True):
        super().__init__()
        self.channels = tuple(channels)
        self.multi_scale = multi_scale
        n_blocks = len(self.channels) if multi_scale else 1
        widths = (in_channels,) + self.channels[:n_blocks]
        self.blocks = nn.ModuleList(ExtractionBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x):
        if x.shape[-1] < 8 or x.shape[-2] < 8:
            raise ValueError(f"input below minimum size: {tuple(x.shape[-2:])} (need >= 8x8)")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def extract(extractor: SensitiveExtractor, image: torch.Tensor) -> list[torch.Tensor]:
    """Run the extractor on a single ``[3, H, W]`` image."""
    return [f[0] for f in extractor(image.unsqueeze(0))]


def location_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity over the channel axis at every spatial location.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``; the channel axis is -3.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    dot = (a * b).sum(dim=-3)
    denom = a.norm(dim=-3) * b.norm(dim=-3)
    return (dot / denom.clamp_min(COSINE_EPS)).clamp(-1.0, 1.0)


def scale_cosines(feats_o, feats_c) -> torch.Tensor:
    """Mean per-location cosine for each pyramid level.

    Returns shape ``[L]`` for unbatched pyramids and ``[B, L]`` for batched.
    """
    if len(feats_o) != len(feats_c):
        raise ValueError(f"pyramid depth mismatch: {len(feats_o)} vs {len(feats_c)}")
    return torch.stack([location_cosine(a, b).mean(dim=(-2, -1)) for a, b in zip(feats_o, feats_c)], dim=-1)


def feature_distortion(feats_o, feats_c) -> torch.Tensor:
    """Per-scale feature-domain distortion, the negated mean cosine; each entry in [-1, 1]."""
    return -scale_cosines(feats_o, feats_c)
