"""Dense float64 tensor kernels: convolution (direct and im2col/GEMM paths),
activations, softmax cross entropy, and spectral norms.

Feature maps and kernels are plain numpy arrays in (n, c, h, w) order,
64-bit floats throughout. Every public function is pure; accumulation
orders are fixed so repeated calls reproduce results bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError, ShapeError


def as_tensor4d(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a contiguous float64 (n, c, h, w) array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite values")
    return a


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a convolution along one spatial axis.

    The spanned extent must divide evenly by the stride and yield a
    positive size; anything else is rejected rather than floored.
    """
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be non-negative, got {pad}")
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"invalid conv geometry: size={size}, k={k}, stride={stride}, pad={pad}"
        )
    return span // stride + 1


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int):
    n, c_in, h, w = x.shape
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (c_out, c_in, k, k), got {kernel.shape}")
    c_out, kc, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    h_out = conv_output_extent(h, kh, stride, pad)
    w_out = conv_output_extent(w, kw, stride, pad)
    return n, c_in, c_out, kh, h_out, w_out


def conv2d_direct(x, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct (non-GEMM) 2-D convolution, returning the pre-activation map.

    Accumulates kernel taps in a fixed (channel, row, col) order so the
    result is reproducible bit for bit.
    """
    x = as_tensor4d(x, "input")
    kernel = as_tensor4d(kernel, "kernel")
    n, c_in, c_out, k, h_out, w_out = _check_conv_shapes(x, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, c_out, h_out, w_out))
    for ci in range(c_in):
        for ki in range(k):
            for kj in range(k):
                patch = xp[:, ci, ki : ki + stride * h_out : stride,
                           kj : kj + stride * w_out : stride]
                taps = kernel[:, ci, ki, kj]
                out += patch[:, None, :, :] * taps[None, :, None, None]
    return out


@dataclass(frozen=True)
class Im2ColMatrix:
    """Unrolled receptive-field patches of a feature map.

    ``data`` has one row per (channel, kernel-row, kernel-col) tap and one
    column per (sample, out-row, out-col) output position, both row-major.
    Multiplying the (c_out, c_in*k*k) kernel matrix by ``data`` reproduces
    the direct convolution.
    """

    data: np.ndarray
    n: int
    c_in: int
    h: int
    w: int
    k: int
    stride: int
    pad: int
    h_out: int
    w_out: int

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def im2col(x, k: int, stride: int = 1, pad: int = 0) -> Im2ColMatrix:
    """Unroll conv patches into a (c_in*k*k, n*h_out*w_out) matrix."""
    x = as_tensor4d(x, "input")
    n, c_in, h, w = x.shape
    h_out = conv_output_extent(h, k, stride, pad)
    w_out = conv_output_extent(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    data = np.empty((c_in * k * k, n * h_out * w_out))
    row = 0
    for ci in range(c_in):
        for ki in range(k):
            for kj in range(k):
                patch = xp[:, ci, ki : ki + stride * h_out : stride,
                           kj : kj + stride * w_out : stride]
                data[row] = patch.reshape(-1)
                row += 1
    return Im2ColMatrix(data, n, c_in, h, w, k, stride, pad, h_out, w_out)


def conv2d_gemm(cols: Im2ColMatrix, kernel) -> np.ndarray:
    """GEMM convolution path: kernel-matrix times im2col matrix."""
    kernel = as_tensor4d(kernel, "kernel")
    c_out, c_in, kh, kw = kernel.shape
    if c_in * kh * kw != cols.rows or kh != cols.k or kw != cols.k:
        raise ShapeError(
            f"kernel {kernel.shape} incompatible with im2col rows={cols.rows}, k={cols.k}"
        )
    out_mat = kernel.reshape(c_out, -1) @ cols.data
    out = out_mat.reshape(c_out, cols.n, cols.h_out, cols.w_out)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def col2im(grad_cols: np.ndarray, cols: Im2ColMatrix) -> np.ndarray:
    """Scatter-add a patch-matrix gradient back to input shape.

    Adjoint of :func:`im2col`; used by backprop for input gradients.
    """
    n, c_in, h, w = cols.n, cols.c_in, cols.h, cols.w
    k, stride, pad = cols.k, cols.stride, cols.pad
    xp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad))
    row = 0
    for ci in range(c_in):
        for ki in range(k):
            for kj in range(k):
                xp[:, ci, ki : ki + stride * cols.h_out : stride,
                   kj : kj + stride * cols.w_out : stride] += (
                    grad_cols[row].reshape(n, cols.h_out, cols.w_out)
                )
                row += 1
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w].copy()
    return xp


def relu(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad_mask(z) -> np.ndarray:
    """Derivative of relu at pre-activation z, with the convention relu'(0) = 0."""
    return (np.asarray(z) > 0.0).astype(np.float64)


def softmax(logits) -> np.ndarray:
    """Row-wise stabilized softmax of a (n, d) logit matrix."""
    o = np.asarray(logits, dtype=np.float64)
    shifted = o - o.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_sum_exp(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    m = o.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(o - m).sum(axis=-1, keepdims=True))).squeeze(-1)


def _check_label(label: np.ndarray):
    if np.any(label < 0.0) or np.any(label > 1.0) or abs(float(label.sum()) - 1.0) > 1e-9:
        raise LabelError(
            f"label must be a probability vector (one-hot or mixed), got sum={label.sum()}"
        )


def softmax_cross_entropy(logits, label) -> float:
    """Softmax cross entropy -sum(y*o) + logsumexp(o) for one logit vector.

    ``label`` is validated as a probability vector: one-hot labels are the
    common case, mixed (e.g. mixup) labels are accepted because the formula
    only requires the entries to sum to one.
    """
    o = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(label, dtype=np.float64).reshape(-1)
    if o.shape != y.shape:
        raise ShapeError(f"logits {o.shape} and label {y.shape} differ")
    _check_label(y)
    return float(log_sum_exp(o) - np.dot(y, o))


def cross_entropy_batch(logits, labels) -> float:
    """Mean softmax cross entropy over a (n, d) batch with (n, d) label rows."""
    o = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if o.shape != y.shape:
        raise ShapeError(f"logits {o.shape} and labels {y.shape} differ")
    per_sample = log_sum_exp(o) - np.einsum("nd,nd->n", y, o)
    return float(per_sample.mean())


def frobenius(x) -> float:
    """Frobenius (entrywise L2) norm of any array."""
    return float(np.sqrt(np.sum(np.square(np.asarray(x, dtype=np.float64)))))


def operator_norm(mat) -> float:
    """Spectral norm by power iteration on A^T A.

    Starts from the normalized all-ones vector and stops once successive
    estimates agree to 1e-10 relative or 1000 iterations elapse. A zero
    matrix returns 0. Degenerate spectra may converge to a tied singular
    value; only the norm value is consumed downstream.
    """
    a = np.asarray(mat, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ShapeError(f"operator_norm needs a non-empty 2-D matrix, got {a.shape}")
    v = np.full(a.shape[1], 1.0 / np.sqrt(a.shape[1]))
    sigma = float(np.linalg.norm(a @ v))
    for _ in range(1000):
        w = a.T @ (a @ v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        sigma_new = float(np.linalg.norm(a @ v))
        if abs(sigma_new - sigma) < 1e-10 * max(sigma_new, 1e-300):
            return sigma_new
        sigma = sigma_new
    return sigma
