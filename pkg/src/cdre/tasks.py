"""Synthetic recognition task: procedural dataset, loss and metric.

Ten classes = five silhouettes x two orientations of a faint stripe texture
laid over the whole image. The low-contrast silhouette survives heavy
compression because block means are coded losslessly; the stripes live in
high-frequency AC coefficients that coarse quantization zeroes. Accuracy
therefore degrades with quality in a controllable way.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import codec

log = logging.getLogger(__name__)

NUM_CLASSES = 10
SHAPES = ("disk", "square", "triangle", "ring", "cross")
IMAGE_SIZE = 64
AMPLITUDE_RANGE = (3.0, 6.0)  # stripe half-amplitude in 8-bit levels
PERIODS = (4, 6, 8)
CONTRAST_RANGE = (25.0, 50.0)  # silhouette vs background, 8-bit levels


@dataclass
class SyntheticSample:
    image: np.ndarray  # uint8 [3, H, W]
    label: int
    seed: int

    def float_image(self):
        return self.image.astype(np.float32) / 255.0


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if shape == "triangle":
        # apex up, base at cy + r*0.7
        top = cy - r
        h = 1.7 * r
        rel = (yy - top) / h
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * r)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        w = 0.35 * r
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(shape)


def render(label: int, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one ``uint8 [3, size, size]`` image of class ``label``."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label {label} out of range")
    rng = np.random.default_rng(seed)
    shape = SHAPES[label // 2]
    vertical = label % 2 == 1
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    bg = rng.uniform(90, 165, 3)
    r = rng.uniform(0.2, 0.33) * size
    cy, cx = rng.uniform(r, size - r, 2)
    mask = _mask(shape, yy, xx, cy, cx, r)
    fg = bg + rng.choice([-1.0, 1.0]) * rng.uniform(*CONTRAST_RANGE)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])

    amp = rng.uniform(*AMPLITUDE_RANGE)
    period = int(rng.choice(PERIODS))
    phase = int(rng.integers(0, period))
    coord = xx if vertical else yy
    img = img + np.where(((coord + phase) % period) < period / 2, amp, -amp)[None]
    img += rng.normal(0, 1.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gen_dataset(seed: int, n: int, size: int = IMAGE_SIZE) -> list[SyntheticSample]:
    """Deterministic, class-balanced synthetic samples."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    labels = np.random.default_rng([seed, 0x5EED]).permutation(np.arange(n) % NUM_CLASSES)
    out = []
    for i, lab in enumerate(labels.tolist()):
        s = sample_seed(seed, i)
        out.append(SyntheticSample(render(lab, s, size), lab, s))
    return out


def stack(samples):
    """``(uint8 [N, 3, H, W], int64 [N])`` arrays from a sample list."""
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def task_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Softmax cross-entropy; accepts a single ``[K]`` row or a ``[B, K]`` batch."""
    single = logits.dim() == 1
    lg = logits.unsqueeze(0) if single else logits
    lab = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    k = lg.shape[-1]
    if lab.numel() != lg.shape[0]:
        raise ValueError(f"{lab.numel()} labels for {lg.shape[0]} logit rows")
    if ((lab < 0) | (lab >= k)).any():
        raise ValueError(f"label out of range [0, {k})")
    return F.cross_entropy(lg, lab)


def task_metric(preds, labels) -> float:
    """Top-1 accuracy. ``preds`` may be class ids or ``[N, K]`` logits."""
    p = np.asarray(preds.detach().cpu() if torch.is_tensor(preds) else preds)
    y = np.asarray(labels.detach().cpu() if torch.is_tensor(labels) else labels)
    if p.ndim == 2:
        p = p.argmax(axis=1)
    if len(p) == 0:
        raise ValueError("empty input")
    if len(p) != len(y):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(y)} labels")
    return float(np.mean(p == y))


# --- compressed-dataset cache --------------------------------------------


def _compress_all(images: np.ndarray, quality: int):
    decoded = np.empty_like(images)
    bpp = np.empty(len(images))
    for i, img in enumerate(images):
        stream = codec.dct_encode(img.astype(np.float64) / 255.0, quality)
        decoded[i] = np.rint(codec.dct_decode(stream) * 255.0).astype(np.uint8)
        bpp[i] = codec.measure_bpp(stream, img.shape[1], img.shape[2])
    return decoded, bpp


def cache_dir():
    d = os.environ.get("CDRE_DATA_DIR")
    return Path(d) if d else None


class SplitData:
    """Originals, labels and per-quality reconstructions of one dataset split.

    Reconstructions are computed lazily per quality and, when
    ``CDRE_DATA_DIR`` is set, cached there as ``.npz`` keyed by content hash.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, tag: str = ""):
        self.images = images
        self.labels = labels
        self.tag = tag or hashlib.sha256(images.tobytes()).hexdigest()[:16]
        self._compressed = {}

    @classmethod
    def generate(cls, seed, n, size=IMAGE_SIZE):
        images, labels = stack(gen_dataset(seed, n, size))
        return cls(images, labels, f"s{seed}-n{n}-z{size}")

    def __len__(self):
        return len(self.labels)

    def compressed(self, quality):
        quality = int(quality)
        if quality not in self._compressed:
            path = None
            d = cache_dir()
            if d is not None:
                path = d / f"{self.tag}-q{quality}.npz"
                if path.exists():
                    with np.load(path) as z:
                        self._compressed[quality] = (z["decoded"], z["bpp"])
                    return self._compressed[quality]
            log.info("compressing %d images at q=%d", len(self), quality)
            self._compressed[quality] = _compress_all(self.images, quality)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.savez(path, decoded=self._compressed[quality][0], bpp=self._compressed[quality][1])
        return self._compressed[quality]

    def mean_bpp(self, quality):
        return float(self.compressed(quality)[1].mean())

    def tensors(self, idx, quality=None):
        """Float tensors ``(x, x_hat, y)`` for indices ``idx``; ``x_hat`` is None without quality."""
        x = torch.from_numpy(self.images[idx].astype(np.float32) / 255.0)
        y = torch.from_numpy(self.labels[idx])
        if quality is None:
            return x, None, y
        xh = torch.from_numpy(self.compressed(quality)[0][idx].astype(np.float32) / 255.0)
        return x, xh, y
