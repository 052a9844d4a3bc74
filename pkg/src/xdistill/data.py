"""Datasets and the few-shot protocol: IDX-format image files, seeded
synthetic blob datasets standing in for the full-scale benchmarks,
deterministic K-shot sampling, and the batch augmentations (mixup,
feature-map Gaussian noise, random crop).

Rotation augmentation is not implemented; random crop covers the
input-space augmentation slot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    IdxCountMismatchError,
    IdxDimensionError,
    IdxMagicError,
    ShapeError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] shaped (n, c, h, w) plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError(f"images must be 4-D, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ShapeError("labels must align with images")
        if images.shape[0] and (images.min() < 0.0 or images.max() > 1.0):
            raise ShapeError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ShapeError("label out of range")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def one_hot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=int)]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Parse an IDX image/label file pair (big-endian, unsigned byte pixels)."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise IdxDimensionError("image file shorter than its own header")
    magic, n, h, w = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    if n * h * w != len(blob) - 16:
        raise IdxDimensionError(
            f"declared {n}x{h}x{w} pixels but file carries {len(blob) - 16} bytes"
        )
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(lblob) < 8:
        raise IdxDimensionError("label file shorter than its own header")
    lmagic, ln = struct.unpack(">II", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if ln != len(lblob) - 8:
        raise IdxDimensionError(f"declared {ln} labels but file carries {len(lblob) - 8}")
    if ln != n:
        raise IdxCountMismatchError(f"{n} images vs {ln} labels")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if ln else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair; pixels are quantized to bytes."""
    if ds.images.shape[1] != 1:
        raise ShapeError("IDX files store single-channel images")
    n, _, h, w = ds.images.shape
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Deterministic bilinear resize of a (ch, wc) grid to (h, w)."""
    ch, cw = coarse.shape
    ys = np.linspace(0.0, ch - 1.0, h)
    xs = np.linspace(0.0, cw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 2) if ch > 1 else np.zeros(h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 2) if cw > 1 else np.zeros(w, int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[np.ix_(y0, x0)]
    b = coarse[np.ix_(y0, np.minimum(x0 + 1, cw - 1))]
    c = coarse[np.ix_(np.minimum(y0 + 1, ch - 1), x0)]
    d = coarse[np.ix_(np.minimum(y0 + 1, ch - 1), np.minimum(x0 + 1, cw - 1))]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def synth_blobs(num_classes: int, per_class: int, c: int = 1, h: int = 16, w: int = 16,
                seed: int = 0, noise: float = 0.2, smooth_noise: float = 0.0,
                coarse: int = 4) -> Dataset:
    """Synthetic classification set: smooth per-class templates plus noise.

    Templates are seeded coarse random grids upsampled bilinearly and
    stretched to span [0.1, 0.9]. Each sample adds i.i.d. Gaussian pixel
    noise (``noise``) and, optionally, a sample-specific low-frequency
    field (``smooth_noise``, same upsampling as the templates) standing in
    for intra-class variation, then clips back to [0, 1]. Deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    templates = np.empty((num_classes, c, h, w))
    for cls in range(num_classes):
        for ch in range(c):
            grid = rng.uniform(0.0, 1.0, (coarse, coarse))
            up = _bilinear_upsample(grid, h, w)
            lo, hi = up.min(), up.max()
            span = hi - lo if hi > lo else 1.0
            templates[cls, ch] = 0.1 + 0.8 * (up - lo) / span
    images = np.empty((num_classes * per_class, c, h, w))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for cls in range(num_classes):
        start = cls * per_class
        jitter = rng.standard_normal((per_class, c, h, w)) * noise
        batch = templates[cls] + jitter
        if smooth_noise > 0.0:
            for i in range(per_class):
                for ch in range(c):
                    field = rng.standard_normal((coarse, coarse))
                    batch[i, ch] += smooth_noise * _bilinear_upsample(field, h, w)
        images[start : start + per_class] = np.clip(batch, 0.0, 1.0)
        labels[start : start + per_class] = cls
    return Dataset(images, labels, num_classes)


def kshot_sample(ds: Dataset, k: int, seed: int) -> Dataset:
    """Exactly k instances per class, chosen by a seeded per-class shuffle."""
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size < k:
            raise ShapeError(f"class {cls} has {idx.size} instances, need {k}")
        perm = rng.permutation(idx.size)
        chosen.append(idx[perm[:k]])
    return ds.subset(np.concatenate(chosen))


def mixup(images, labels_probs, lam: float, seed: int):
    """Pairwise convex interpolation with a seeded permutation partner.

    Returns (mixed images, mixed label probability rows); lam = 1 returns
    the inputs unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels_probs, dtype=np.float64)
    if lam == 1.0:
        return x, y
    perm = np.random.default_rng(seed).permutation(x.shape[0])
    return lam * x + (1.0 - lam) * x[perm], lam * y + (1.0 - lam) * y[perm]


def draw_mixup_lambda(seed: int, a: float = 0.2) -> float:
    """Beta(a, a) draw used per batch when mixup is enabled."""
    return float(np.random.default_rng(seed).beta(a, a))


def gaussian_feature_noise(h, scale: float, seed: int) -> np.ndarray:
    """Add seeded N(0, (scale*max(h))^2) noise to a feature map."""
    h = np.asarray(h, dtype=np.float64)
    if scale == 0.0:
        return h
    sd = scale * float(h.max())
    return h + np.random.default_rng(seed).normal(0.0, sd, h.shape)


def random_crop(x, pad: int, seed: int) -> np.ndarray:
    """Zero-pad by ``pad`` then take per-sample seeded offset crops."""
    x = np.asarray(x, dtype=np.float64)
    if pad == 0:
        return x.copy()
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rng = np.random.default_rng(seed)
    out = np.empty_like(x)
    for i in range(n):
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        out[i] = xp[i, :, oy : oy + h, ox : ox + w]
    return out
