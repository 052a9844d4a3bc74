"""Regularizers and their proximal maps: elementwise L1 soft-thresholding,
group (per-output-channel) L2 shrinkage, symmetric-grid weight quantization,
and the linear sparsity ramp that schedules them.

The pruning threshold is derived from a target sparsity level by taking the
magnitude quantile that zeroes exactly the requested count, rather than
using a raw additive threshold; see ``level_to_lambda``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

REG_KINDS = ("l1", "group21", "quant_project", "quant_penalty")


@dataclass(frozen=True)
class Regularizer:
    """Choice of penalty applied by the proximal step during distillation.

    ``target_sparsity`` drives the l1/group21 ramp; ``bits`` selects the
    quantization grid; ``penalty_weight`` is the pull strength for the
    partial-projection (ProxQuant-style) mode.
    """

    kind: str = "l1"
    target_sparsity: float = 0.0
    bits: int = 2
    penalty_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.kind.startswith("quant") and self.bits < 2:
            raise ValueError(f"quantization needs bits >= 2, got {self.bits}")
        if self.penalty_weight < 0.0:
            raise ValueError("penalty_weight must be non-negative")


@dataclass(frozen=True)
class Schedule:
    """Linear sparsity ramp: 0 at step 0 up to ``target`` at ``ramp_iters``."""

    target: float
    ramp_iters: int
    total_iters: int

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target must be in [0, 1), got {self.target}")
        if self.ramp_iters < 1 or self.ramp_iters > self.total_iters:
            raise ValueError(
                f"need 1 <= ramp_iters <= total_iters, got {self.ramp_iters}/{self.total_iters}"
            )


def schedule_value(sched: Schedule, t: int) -> float:
    """Sparsity level at step t: target * min(t / ramp_iters, 1)."""
    if t <= 0:
        return 0.0
    return sched.target * min(t / sched.ramp_iters, 1.0)


def prox_l1(w, lam: float) -> np.ndarray:
    """Elementwise soft threshold: shrink toward zero by lam, clip inside."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    return np.sign(w) * np.maximum(np.abs(w) - lam, 0.0)


def group_norms(w) -> np.ndarray:
    """L2 norm of each output-channel slice of a (c_out, c_in, k, k) kernel."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"group prox expects a 4-D kernel, got shape {w.shape}")
    return np.sqrt(np.sum(np.square(w), axis=(1, 2, 3)))


def prox_group(w, lam: float) -> np.ndarray:
    """Group-L2 shrinkage max(1 - lam/||g||, 0) * g per output channel."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    norms = group_norms(w)
    scale = np.zeros_like(norms)
    nz = norms > 0.0
    scale[nz] = np.maximum(1.0 - lam / norms[nz], 0.0)
    return w * scale[:, None, None, None]


def _magnitudes(w, kind: str) -> np.ndarray:
    if kind == "l1":
        return np.abs(np.asarray(w, dtype=np.float64)).reshape(-1)
    if kind == "group21":
        return group_norms(w)
    raise ValueError(f"level_to_lambda undefined for kind {kind!r}")


def level_to_lambda(w, level: float, kind: str = "l1") -> float:
    """Magnitude quantile whose soft-threshold zeroes exactly the target count.

    For l1 the count target is ceil(level * n_elements); for group21 it is
    ceil(level * n_groups). The returned lambda is the m-th smallest
    magnitude (ties share the value; exact-count application breaks them by
    zeroing the earlier index, see ``prox_at_level``).
    """
    if not 0.0 <= level < 1.0:
        raise ValueError(f"level must be in [0, 1), got {level}")
    mags = _magnitudes(w, kind)
    m = int(np.ceil(level * mags.size))
    if m == 0:
        return 0.0
    return float(np.sort(mags)[m - 1])


def prox_at_level(w, level: float, kind: str = "l1"):
    """Apply the scheduled prox so that exactly ceil(level*n) units are zero.

    Returns (new_weights, lambda). Units are elements (l1) or output-channel
    groups (group21); ties in magnitude zero the earlier index first.
    Survivors shrink by lambda exactly as the plain prox would.
    """
    w = np.asarray(w, dtype=np.float64)
    mags = _magnitudes(w, kind)
    m = int(np.ceil(level * mags.size))
    if m == 0:
        return w.copy(), 0.0
    order = np.argsort(mags, kind="stable")
    lam = float(mags[order[m - 1]])
    if kind == "l1":
        out = prox_l1(w, lam).reshape(-1)
        out[order[:m]] = 0.0
        return out.reshape(w.shape), lam
    out = prox_group(w, lam)
    out[order[:m]] = 0.0
    return out, lam


def project_level(w, level: float, kind: str = "l1"):
    """Projection onto the scheduled sparsity level: zero the smallest units.

    Zeroes exactly ceil(level*n) elements (l1) or output-channel groups
    (group21) of smallest magnitude, leaving survivors untouched; this is
    the proximal map of the sparsity-level constraint set that the ramp
    drives during distillation. Ties zero the earlier index first. Returns
    (new_weights, lambda) with lambda the threshold magnitude.
    """
    w = np.asarray(w, dtype=np.float64)
    mags = _magnitudes(w, kind)
    m = int(np.ceil(level * mags.size))
    if m == 0:
        return w.copy(), 0.0
    order = np.argsort(mags, kind="stable")
    lam = float(mags[order[m - 1]])
    out = w.copy()
    if kind == "l1":
        flat = out.reshape(-1)
        flat[order[:m]] = 0.0
    else:
        out[order[:m]] = 0.0
    return out, lam


def quant_points(bits: int) -> np.ndarray:
    """Symmetric quantization grid {0, +/-1/(2^(B-1)-1), ..., +/-1}.

    Contains 2^B - 1 values, sorted ascending.
    """
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    levels = 2 ** (bits - 1) - 1
    return np.arange(-levels, levels + 1, dtype=np.float64) / levels


@dataclass(frozen=True)
class QuantMap:
    """Affine bookkeeping for dequantization: [lo, hi] <-> [0, 1] <-> [-1, 1]."""

    lo: float
    hi: float

    def to_symmetric(self, w01: np.ndarray) -> np.ndarray:
        return 2.0 * w01 - 1.0

    def from_symmetric(self, q: np.ndarray) -> np.ndarray:
        return self.lo + (q + 1.0) * 0.5 * (self.hi - self.lo)


def normalize_g(w):
    """Three-sigma truncation followed by min-max normalization to [0, 1].

    Returns (w01, QuantMap). Constant inputs degenerate to all 0.5 with a
    warning; the recorded map then dequantizes back to the constant.
    """
    w = np.asarray(w, dtype=np.float64)
    mean = float(w.mean())
    sd = float(w.std())
    trunc = np.clip(w, mean - 3.0 * sd, mean + 3.0 * sd)
    lo = float(trunc.min())
    hi = float(trunc.max())
    if hi == lo:
        warnings.warn("normalize_g: constant weights, returning all 0.5", stacklevel=2)
        return np.full_like(w, 0.5), QuantMap(lo, hi)
    return (trunc - lo) / (hi - lo), QuantMap(lo, hi)


def project_q(values, points) -> np.ndarray:
    """Nearest point in the grid, with exact midpoints rounding toward zero."""
    v = np.asarray(values, dtype=np.float64)
    q = np.asarray(points, dtype=np.float64)
    idx = np.searchsorted(q, v)
    lo_i = np.clip(idx - 1, 0, q.size - 1)
    hi_i = np.clip(idx, 0, q.size - 1)
    lo, hi = q[lo_i], q[hi_i]
    d_lo = np.abs(v - lo)
    d_hi = np.abs(v - hi)
    pick_hi = d_hi < d_lo
    tie = d_hi == d_lo
    out = np.where(pick_hi, hi, lo)
    out[tie] = np.where(np.abs(hi) < np.abs(lo), hi, lo)[tie]
    return out


def quantize_weights(w, bits: int) -> np.ndarray:
    """Full weight quantization pipe: truncate, normalize, project, dequantize.

    The result takes at most 2^B - 1 distinct values per call and is the
    tensor actually used in forward passes under lazy projection.
    """
    w01, qmap = normalize_g(w)
    grid = quant_points(bits)
    q = project_q(qmap.to_symmetric(w01), grid)
    return qmap.from_symmetric(q)


def prox_quant_penalty(w, bits: int, strength: float) -> np.ndarray:
    """Partial pull toward the quantized point: (w + s*q(w)) / (1 + s).

    strength 0 is the identity; strength -> inf recovers full projection.
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    if strength == 0.0:
        return w.copy()
    return (w + strength * quantize_weights(w, bits)) / (1.0 + strength)


def clip_activations(h) -> np.ndarray:
    """Clamp feature-map values to [0, 1] for activation quantization runs."""
    return np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0)
