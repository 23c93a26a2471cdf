"""Distortion codec: modulated encoder, binary quantizer, bitstream, decoders.

The encoder sees the original and the compressed frame side by side and is
steered by the extractor pyramids through per-scale scale/shift modulation.
Its latent is binarized (sigmoid then round) and sent as a fixed-rate side
stream; on the receiving end it is decoded either to a full-resolution
feature map (CNN backbones) or to a token set (transformer backbones).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import MalformedBitstreamError
from .extractor import EXTRACTOR_CHANNELS

ENCODER_WIDTHS = (8, 12, 16, 16, 16)
DOWNSAMPLE = 2 ** len(ENCODER_WIDTHS)
LATENT_CHANNELS = 6
DECODED_CHANNELS = 8
MODULATION_MODES = ("film", "concat")

MAGIC = b"CDRD"
VERSION = 1
HEADER = struct.Struct(">4sBHHBHH")


def latent_size(h: int, w: int) -> tuple[int, int]:
    return math.ceil(h / DOWNSAMPLE), math.ceil(w / DOWNSAMPLE)


def modulate(feature: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Elementwise ``alpha * feature + beta``; all three shapes must match."""
    if not (feature.shape == alpha.shape == beta.shape):
        raise ValueError(
            f"modulation shape mismatch: F {tuple(feature.shape)}, "
            f"alpha {tuple(alpha.shape)}, beta {tuple(beta.shape)}"
        )
    return alpha * feature + beta


class Modulation(nn.Module):
    """Per-scale 1x1 convs turning ``cat(F_o, F_c)`` into encoder conditioning.

    ``mode="film"`` predicts scale and shift maps (initialized to 1 and 0 so
    the encoder starts unmodulated). ``mode="concat"`` instead fuses the
    pyramid into the encoder feature with one 1x1 conv, the ablation baseline.
    """

    def __init__(self, extractor_channels=EXTRACTOR_CHANNELS, encoder_widths=ENCODER_WIDTHS, mode="film"):
        super().__init__()
        if mode not in MODULATION_MODES:
            raise ValueError(f"unknown modulation mode {mode!r}")
        self.mode = mode
        pairs = list(zip(extractor_channels, encoder_widths))
        if mode == "film":
            self.alpha = nn.ModuleList(nn.Conv2d(2 * c, w, 1) for c, w in pairs)
            self.beta = nn.ModuleList(nn.Conv2d(2 * c, w, 1) for c, w in pairs)
            for conv in self.alpha:
                nn.init.zeros_(conv.weight)
                nn.init.ones_(conv.bias)
            for conv in self.beta:
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
        else:
            self.fuse = nn.ModuleList(nn.Conv2d(w + 2 * c, w, 1) for c, w in pairs)

    @property
    def n_scales(self):
        return len(self.alpha) if self.mode == "film" else len(self.fuse)

    def params(self, i, f_o, f_c):
        """Scale and shift maps for encoder block ``i``."""
        cond = torch.cat([f_o, f_c], dim=1)
        return self.alpha[i](cond), self.beta[i](cond)

    def forward(self, i, feature, f_o, f_c):
        if feature.shape[-2:] != f_o.shape[-2:]:
            raise ValueError(
                f"pyramid level {i + 1} is {tuple(f_o.shape[-2:])}, "
                f"encoder block is {tuple(feature.shape[-2:])}"
            )
        if self.mode == "film":
            alpha, beta = self.params(i, f_o, f_c)
            return modulate(feature, alpha, beta)
        return self.fuse[i](torch.cat([feature, f_o, f_c], dim=1))


class DistortionEncoder(nn.Module):
    """Five stride-2 conv blocks from the 6-channel pair to a ``C_y`` latent at 1/32 scale."""

    def __init__(self, latent_channels=LATENT_CHANNELS, widths=ENCODER_WIDTHS):
        super().__init__()
        self.latent_channels = latent_channels
        chans = (6,) + tuple(widths)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(a, b, 3, stride=2, padding=1), nn.LeakyReLU(0.01))
            for a, b in zip(chans[:-1], chans[1:])
        )
        self.head = nn.Conv2d(chans[-1], latent_channels, 1)
        # He init with zero bias: with the torch default, per-sample variation
        # shrinks ~3x per block and every image binarizes to the same bits
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.01, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def forward(self, x, x_hat, feats_o=None, feats_c=None, modulation=None):
        if x.shape != x_hat.shape:
            raise ValueError(f"pair shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        h = torch.cat([x, x_hat], dim=1)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if modulation is not None and i < min(modulation.n_scales, len(feats_o)):
                h = modulation(i, h, feats_o[i], feats_c[i])
        return self.head(h)


class _BinarizeSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y):
        s = torch.sigmoid(y)
        ctx.save_for_backward(s)
        return (y >= 0).to(y.dtype)

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved_tensors
        return grad * s * (1 - s)


def binarize(y: torch.Tensor) -> torch.Tensor:
    """Round ``sigmoid(y)`` to {0, 1} (ties up); backward uses the sigmoid derivative."""
    return _BinarizeSTE.apply(y)


@dataclass
class BinaryRepresentation:
    """Bit grid ``[C, h, w]`` plus the true source frame size."""

    bits: np.ndarray
    source_h: int
    source_w: int

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 3:
            raise ValueError(f"bits must be [C, h, w], got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("bits must be exactly 0 or 1")
        self.bits = bits.astype(np.uint8)
        self.source_h = int(self.source_h)
        self.source_w = int(self.source_w)

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryRepresentation):
            return NotImplemented
        return (
            self.source_h == other.source_h
            and self.source_w == other.source_w
            and self.bits.shape == other.bits.shape
            and bool((self.bits == other.bits).all())
        )

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.bits.astype(np.float32)).to(dtype)


def quantize(y: torch.Tensor, source_h: int, source_w: int) -> BinaryRepresentation:
    """Binarize an unbatched ``[C, h, w]`` latent for transmission."""
    if not torch.isfinite(y).all():
        raise ValueError("latent contains non-finite values")
    bits = (y.detach() >= 0).to(torch.uint8).cpu().numpy()
    return BinaryRepresentation(bits, source_h, source_w)


def serialize(b: BinaryRepresentation) -> bytes:
    c, lh, lw = b.bits.shape
    header = HEADER.pack(MAGIC, VERSION, b.source_h, b.source_w, c, lh, lw)
    return header + np.packbits(b.bits.reshape(-1)).tobytes()


def deserialize(data: bytes) -> BinaryRepresentation:
    data = bytes(data)
    if len(data) < HEADER.size:
        raise MalformedBitstreamError("malformed distortion bitstream: truncated header", len(data))
    magic, version, sh, sw, c, lh, lw = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedBitstreamError("malformed distortion bitstream: bad magic", 0)
    if version != VERSION:
        raise MalformedBitstreamError(f"malformed distortion bitstream: unsupported version {version}", 4)
    n = c * lh * lw
    need = (n + 7) // 8
    payload = data[HEADER.size:]
    if len(payload) < need:
        raise MalformedBitstreamError("malformed distortion bitstream: truncated payload", len(data))
    if len(payload) > need:
        raise MalformedBitstreamError("malformed distortion bitstream: trailing data", HEADER.size + need)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    if bits[n:].any():
        raise MalformedBitstreamError("malformed distortion bitstream: nonzero padding", len(data) - 1)
    return BinaryRepresentation(bits[:n].reshape(c, lh, lw), sh, sw)


def side_bpp(b: BinaryRepresentation) -> float:
    """Payload bits per source pixel (header excluded)."""
    if b.source_h <= 0 or b.source_w <= 0:
        raise ValueError(f"source dims must be positive, got {b.source_h}x{b.source_w}")
    return b.bits.size / (b.source_h * b.source_w)


def side_bpp_for(h: int, w: int, channels: int = LATENT_CHANNELS) -> float:
    lh, lw = latent_size(h, w)
    return channels * lh * lw / (h * w)


class CNNDistortionDecoder(nn.Module):
    """Five x2 transposed-conv blocks back to a ``C_d``-channel full-resolution map."""

    def __init__(self, latent_channels=LATENT_CHANNELS, out_channels=DECODED_CHANNELS, widths=(16, 16, 16, 12)):
        super().__init__()
        chans = (latent_channels,) + tuple(widths) + (out_channels,)
        layers = []
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.ConvTranspose2d(a, b, 4, stride=2, padding=1))
            if i < len(chans) - 2:
                layers.append(nn.LeakyReLU(0.01))
        self.net = nn.Sequential(*layers)

    def forward(self, bits, source_h, source_w):
        return self.net(bits)[..., :source_h, :source_w]


class TokenDistortionDecoder(nn.Module):
    """Flatten latent positions to tokens, then a two-layer pointwise projection."""

    def __init__(self, token_dim, latent_channels=LATENT_CHANNELS, hidden=None):
        super().__init__()
        if token_dim <= 0:
            raise ValueError("token_dim must be positive")
        hidden = hidden or token_dim
        self.token_dim = token_dim
        self.net = nn.Sequential(nn.Linear(latent_channels, hidden), nn.GELU(), nn.Linear(hidden, token_dim))

    def forward(self, bits):
        # [B, C, h, w] -> [B, h*w, C]
        return self.net(bits.flatten(2).transpose(1, 2))


def decode_cnn(b: BinaryRepresentation, decoder: CNNDistortionDecoder) -> torch.Tensor:
    """Decode one representation to ``[C_d, source_h, source_w]``."""
    with torch.no_grad():
        return decoder(b.tensor().unsqueeze(0), b.source_h, b.source_w)[0]


def decode_transformer(b: BinaryRepresentation, decoder: TokenDistortionDecoder) -> torch.Tensor:
    """Decode one representation to ``[latent_h * latent_w, token_dim]``."""
    with torch.no_grad():
        return decoder(b.tensor().unsqueeze(0))[0]


def encode_distortion(pair, extractor, encoder, modulation=None) -> torch.Tensor:
    """Compact latent ``[C_y, ceil(H/32), ceil(W/32)]`` for one image pair."""
    x = torch.as_tensor(np.asarray(pair.original), dtype=torch.float32).unsqueeze(0)
    x_hat = torch.as_tensor(np.asarray(pair.compressed), dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        feats_o, feats_c = extractor(x), extractor(x_hat)
        return encoder(x, x_hat, feats_o, feats_c, modulation)[0]
