"""Full-network training: cross-entropy backprop, the Adam optimizer shared
with the layer-wise distillation loop, teacher training from scratch, and
masked fine-tuning after compression.

All loops are single-threaded and deterministic under a fixed seed; a
non-finite loss aborts instead of being clipped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .network import ConvSpec, Network, WeightMask, init_network
from .tensor import (
    col2im,
    conv2d_gemm,
    cross_entropy_batch,
    im2col,
    relu,
    relu_grad_mask,
    softmax,
)

LR_RANGE = (1e-5, 1e-3)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not LR_RANGE[0] <= self.lr <= LR_RANGE[1]:
            warnings.warn(
                f"lr={self.lr} outside the documented range {LR_RANGE}", stacklevel=2
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameter tensors."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads) -> list[np.ndarray]:
    """One Adam update; returns the new parameter tensors."""
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeError("adam_step: parameter/gradient/moment counts differ")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * np.square(g)
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def _labels_to_probs(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        return np.asarray(y, dtype=np.float64)
    return np.eye(num_classes)[y.astype(int)]


def _forward_trace(net: Network, x: np.ndarray):
    """Forward pass keeping per-layer caches for the backward sweep."""
    h = x
    caches = []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        if isinstance(spec, ConvSpec):
            cols = im2col(h, spec.k, spec.stride, spec.pad)
            z = conv2d_gemm(cols, w)
            caches.append((spec, w, cols, z, None))
        else:
            flat = h.reshape(h.shape[0], -1)
            z = flat @ w.T
            if b is not None:
                z = z + b
            caches.append((spec, w, flat, z, h.shape))
        h = relu(z) if spec.activation == "relu" else z
    return h, caches


def _backprop(net: Network, x, y: np.ndarray, mask: WeightMask | None):
    logits, caches = _forward_trace(net, x)
    loss = cross_entropy_batch(logits, y)
    n = x.shape[0]
    d = (softmax(logits) - y) / n
    grads_w: list[np.ndarray | None] = [None] * net.num_layers
    grads_b: list[np.ndarray | None] = [None] * net.num_layers
    for li in range(net.num_layers - 1, -1, -1):
        spec, w, cache, z, extra = caches[li]
        if spec.activation == "relu":
            d = d * relu_grad_mask(z)
        if isinstance(spec, ConvSpec):
            c_out = spec.c_out
            dmat = d.transpose(1, 0, 2, 3).reshape(c_out, -1)
            grads_w[li] = (dmat @ cache.data.T).reshape(w.shape)
            if li > 0:
                d = col2im(w.reshape(c_out, -1).T @ dmat, cache)
        else:
            grads_w[li] = d.T @ cache
            grads_b[li] = None if net.biases[li] is None else d.sum(axis=0)
            if li > 0:
                d = (d @ w).reshape(extra)
    if mask is not None:
        grads_w = [g * m for g, m in zip(grads_w, mask.masks)]
    return loss, logits, grads_w, grads_b


def backprop_grads(net: Network, x, labels, mask: WeightMask | None = None):
    """Exact gradients of mean softmax cross entropy w.r.t. every weight.

    Returns (loss, weight_grads, bias_grads). With a mask, gradients at
    masked entries are zeroed.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = _labels_to_probs(labels, net.layers[-1].d_out)
    loss, _, grads_w, grads_b = _backprop(net, x, y, mask)
    return loss, grads_w, grads_b


def _batch_plan(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Index batches for one epoch: full-batch for small sets, else shuffled."""
    if n <= 256:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _train_loop(net: Network, dataset, cfg: TrainConfig, mask: WeightMask | None):
    num_classes = net.layers[-1].d_out
    weights = [w.copy() for w in net.weights]
    biases = [None if b is None else b.copy() for b in net.biases]
    if mask is not None:
        weights = [w * m for w, m in zip(weights, mask.masks)]
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log = []
    iteration = 0
    for _ in range(cfg.epochs):
        for idx in _batch_plan(dataset.images.shape[0], cfg, rng):
            xb = dataset.images[idx]
            yb = np.asarray(dataset.labels)[idx]
            current = net.replace_weights(weights, biases)
            y = _labels_to_probs(yb, num_classes)
            loss, logits, gw, gb = _backprop(current, xb, y, mask)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at iteration {iteration}")
            hard = yb if yb.ndim == 1 else np.argmax(yb, axis=1)
            acc = float(np.mean(np.argmax(logits, axis=1) == hard))
            params, grads = list(weights), list(gw)
            bias_slots = [i for i, b in enumerate(biases) if b is not None]
            params += [biases[i] for i in bias_slots]
            grads += [gb[i] for i in bias_slots]
            updated = adam_step(state, params, grads)
            weights = updated[: len(weights)]
            for j, i in enumerate(bias_slots):
                biases[i] = updated[len(weights) + j]
            if mask is not None:
                weights = [w * m for w, m in zip(weights, mask.masks)]
            iteration += 1
            log.append((iteration, loss, acc))
    return net.replace_weights(weights, biases), log


def train_teacher(specs, dataset, cfg: TrainConfig):
    """Train a teacher from scratch; returns (network, log rows).

    Log rows are (iteration, loss, train_acc) per optimizer step. Runs are
    bitwise reproducible for a fixed config and seed.
    """
    if dataset.images.shape[0] == 0:
        raise ShapeError("dataset is empty")
    net = init_network(specs, cfg.seed, role="teacher")
    return _train_loop(net, dataset, cfg, mask=None)


def finetune(net: Network, mask: WeightMask, dataset, cfg: TrainConfig):
    """Cross-entropy fine-tuning that preserves the pruned zero pattern.

    Masked entries stay exactly zero through every step; returns the new
    network and the (iteration, loss, train_acc) log.
    """
    if dataset.images.shape[0] == 0:
        raise ShapeError("dataset is empty")
    return _train_loop(net, dataset, cfg, mask=mask)
