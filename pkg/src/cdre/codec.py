"""Block-DCT surrogate codec and external image-pair ingestion.

The surrogate stands in for the real codecs a deployment would use: it yields
a reconstructed frame plus an honest bit count, which is all the rest of the
pipeline needs. Bitstream layout (big-endian)::

    "CDRB" | version u8 | H u16 | W u16 | q u8 | payload

The payload codes every channel's 8x8 blocks in raster order. Pixels are first
snapped to 8-bit levels and shifted by -128. AC coefficients are divided by
``max(1, 100 - q)`` and rounded. The DC coefficient is stored as the integer
block sum (quantizer step 1/8, lossless for 8-bit input) and predicted from
the previous block of the same channel.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from . import entropy
from .errors import MalformedBitstreamError

MAGIC = b"CDRB"
VERSION = 1
HEADER = struct.Struct(">4sBHHB")
BLOCK = 8


def _zigzag_order(n=BLOCK):
    order = sorted(
        ((r, c) for r in range(n) for c in range(n)),
        key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else rc[1]),
    )
    return np.array([r * n + c for r, c in order])


ZIGZAG = _zigzag_order()
UNZIGZAG = np.argsort(ZIGZAG)


@dataclass
class ImagePair:
    """An original frame, its codec reconstruction and the base-stream rate."""

    original: np.ndarray
    compressed: np.ndarray
    base_bpp: float

    def __post_init__(self):
        self.original = np.asarray(self.original)
        self.compressed = np.asarray(self.compressed)
        if self.original.shape != self.compressed.shape:
            raise ValueError(
                f"shape mismatch: original {self.original.shape} vs compressed {self.compressed.shape}"
            )
        if not (math.isfinite(self.base_bpp) and self.base_bpp >= 0):
            raise ValueError(f"base_bpp must be finite and >= 0, got {self.base_bpp}")


TIE_DECIMALS = 9


def quant_step(quality: int) -> int:
    """Uniform AC quantizer step for a quality setting."""
    return max(1, 100 - int(quality))


def _check_quality(quality):
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 99:
        raise ValueError(f"invalid quality: {quality!r} (expected integer in [1, 99])")
    return int(quality)


def _to_blocks(plane_stack):
    c, h, w = plane_stack.shape
    return plane_stack.reshape(c, h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)


def _from_blocks(blocks):
    c, by, bx, _, _ = blocks.shape
    return blocks.transpose(0, 1, 3, 2, 4).reshape(c, by * BLOCK, bx * BLOCK)


def _pad(pixels):
    _, h, w = pixels.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    if not (ph or pw):
        return pixels
    mode_h = "reflect" if h > 1 else "edge"
    mode_w = "reflect" if w > 1 else "edge"
    out = np.pad(pixels, ((0, 0), (0, ph), (0, 0)), mode=mode_h)
    return np.pad(out, ((0, 0), (0, 0), (0, pw)), mode=mode_w)


def quantize_image(image, quality):
    """Return the zig-zagged integer coefficient blocks ``[C*by*bx, 64]``.

    DC entries are absolute block sums (not yet predicted).
    """
    img = np.asarray(image, dtype=np.float64)
    pixels = np.clip(np.rint(img * 255.0), 0, 255) - 128.0
    blocks = _to_blocks(_pad(pixels))
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    # snap before rounding so exact ties (common on integer blocks) resolve
    # half-to-even regardless of transform round-off
    levels = np.rint(np.round(coeffs / quant_step(quality), TIE_DECIMALS))
    levels[..., 0, 0] = np.rint(np.round(coeffs[..., 0, 0] * BLOCK, TIE_DECIMALS))
    flat = levels.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG]
    return flat.astype(np.int64)


def dequantize_blocks(flat, shape, quality):
    """Reconstruct 8-bit-level pixels from zig-zagged levels; ``shape`` = (C, Hp, Wp)."""
    c, hp, wp = shape
    raster = flat[:, UNZIGZAG].astype(np.float64)
    coeffs = raster.reshape(c, hp // BLOCK, wp // BLOCK, BLOCK, BLOCK) * quant_step(quality)
    coeffs[..., 0, 0] = raster.reshape(c, hp // BLOCK, wp // BLOCK, BLOCK, BLOCK)[..., 0, 0] / BLOCK
    pixels = idctn(coeffs, type=2, norm="ortho", axes=(-2, -1))
    return np.clip(np.rint(_from_blocks(pixels) + 128.0), 0, 255)


def dct_encode(image, quality: int) -> bytes:
    """Compress a ``[C, H, W]`` image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty input")
    if img.ndim != 3:
        raise ValueError(f"expected [C, H, W] image, got shape {img.shape}")
    quality = _check_quality(quality)
    c, h, w = img.shape
    if h > 0xFFFF or w > 0xFFFF or c != 3:
        raise ValueError(f"unsupported image shape {img.shape}")
    flat = quantize_image(img, quality)
    per_channel = flat.shape[0] // c
    dc = flat[:, 0].reshape(c, per_channel)
    flat[:, 0] = np.diff(dc, axis=1, prepend=0).reshape(-1)
    return HEADER.pack(MAGIC, VERSION, h, w, quality) + entropy.encode_blocks(flat)


def read_header(data: bytes):
    """Parse the header; returns ``(H, W, quality)``."""
    if len(data) < HEADER.size:
        raise MalformedBitstreamError("malformed bitstream: truncated header", len(data))
    magic, version, h, w, q = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedBitstreamError("malformed bitstream: bad magic", 0)
    if version != VERSION:
        raise MalformedBitstreamError(f"malformed bitstream: unsupported version {version}", 4)
    if h == 0 or w == 0:
        raise MalformedBitstreamError("malformed bitstream: zero dimension", 5)
    if not 1 <= q <= 99:
        raise MalformedBitstreamError("malformed bitstream: invalid quality", 9)
    return h, w, q


def dct_decode(data: bytes) -> np.ndarray:
    """Decode to a float64 ``[3, H, W]`` array in [0, 1]."""
    data = bytes(data)
    h, w, q = read_header(data)
    hp, wp = h + (-h % BLOCK), w + (-w % BLOCK)
    per_channel = (hp // BLOCK) * (wp // BLOCK)
    flat = entropy.decode_blocks(data[HEADER.size:], 3 * per_channel, HEADER.size).astype(np.int64)
    flat[:, 0] = np.cumsum(flat[:, 0].reshape(3, per_channel), axis=1).reshape(-1)
    pixels = dequantize_blocks(flat, (3, hp, wp), q)
    return pixels[:, :h, :w] / 255.0


def measure_bpp(bitstream: bytes, h: int, w: int) -> float:
    """Bits per pixel of a byte stream over an ``h x w`` frame."""
    if h * w <= 0:
        raise ValueError(f"pixel count must be positive, got {h}x{w}")
    return 8.0 * len(bitstream) / (h * w)


def compress(image, quality: int) -> ImagePair:
    """Round-trip ``image`` through the surrogate codec."""
    img = np.asarray(image, dtype=np.float64)
    stream = dct_encode(img, quality)
    return ImagePair(img, dct_decode(stream), measure_bpp(stream, img.shape[1], img.shape[2]))


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# --- external pairs -------------------------------------------------------


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path)
        return np.asarray(arr, dtype=np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_manifest(path) -> list[dict]:
    """Read a manifest: a JSON array, or JSON Lines with one record per line.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text()
    stripped = text.lstrip()
    if stripped.startswith("["):
        entries = json.loads(text)
    else:
        entries = [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for i, e in enumerate(entries):
        missing = {"original_path", "compressed_path", "base_bpp"} - set(e)
        if missing:
            raise ValueError(f"manifest entry {i}: missing fields {sorted(missing)}")
        bpp = float(e["base_bpp"])
        if not (math.isfinite(bpp) and bpp >= 0):
            raise ValueError(f"manifest entry {i}: base_bpp must be finite and >= 0")
        out.append(
            {
                "original_path": path.parent / e["original_path"],
                "compressed_path": path.parent / e["compressed_path"],
                "base_bpp": bpp,
            }
        )
    return out


def load_external_pairs(manifest):
    """Yield an :class:`ImagePair` per manifest entry.

    ``manifest`` is a path or an already-parsed list of entries.
    """
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    for i, e in enumerate(entries):
        orig = _load_image(Path(e["original_path"]))
        comp = _load_image(Path(e["compressed_path"]))
        if orig.shape != comp.shape:
            raise ValueError(
                f"manifest entry {i} ({e['original_path']}): dimension mismatch "
                f"{orig.shape} vs {comp.shape}"
            )
        yield ImagePair(orig, comp, float(e["base_bpp"]))
