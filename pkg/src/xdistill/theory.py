"""Numerical evaluation of the error-propagation analysis: the Lipschitz
constant of softmax cross entropy, per-layer operator norms and their
convex combinations, the full cross-entropy gap bound, and the per-layer
inconsistency diagnostics.

The bound is evaluated per input sample with un-squared Euclidean norms
(the proofs' convention), while the training losses stay batch-mean
squared; the report keeps the squared variants only as diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import LayerContext, branch_residual
from .errors import ShapeError
from .network import ConvSpec, LinearSpec, Network, forward_collect
from .tensor import operator_norm, softmax_cross_entropy


def weight_matrix(w) -> np.ndarray:
    """Kernel as the 2-D operator acting on im2col columns.

    4-D (c_out, c_in, k, k) kernels flatten to (c_out, c_in*k*k); 2-D
    weights pass through.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1)
    if w.ndim == 2:
        return w
    raise ShapeError(f"expected 2-D or 4-D weights, got shape {w.shape}")


def lipschitz_C(final_linear_weights) -> float:
    """Lipschitz constant of the softmax cross entropy through the final
    linear layer: (C0 + 1) * ||W|| with C0 = 1, i.e. twice the spectral norm.
    """
    mat = weight_matrix(final_linear_weights)
    return 2.0 * operator_norm(mat)


def c_k_mu(w_s_mat, w_t_mat, mu: float) -> float:
    """Per-layer amplification constant mu*||W_S|| + (1-mu)*||W_T||."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must be in [0, 1], got {mu}")
    if mu == 1.0:
        return operator_norm(weight_matrix(w_s_mat))
    if mu == 0.0:
        return operator_norm(weight_matrix(w_t_mat))
    return mu * operator_norm(weight_matrix(w_s_mat)) + (1.0 - mu) * operator_norm(
        weight_matrix(w_t_mat)
    )


@dataclass(frozen=True)
class LayerBoundRow:
    position: int
    norm_t: float
    norm_s: float
    c_mu: float
    objective_mean: float  # mean per-sample un-squared convex objective
    objective_max: float
    est_error: float  # mean per-sample squared estimation error
    eps_t: float  # squared teacher-branch inconsistency
    eps_s: float  # squared student-branch inconsistency


@dataclass(frozen=True)
class BoundReport:
    """Everything the gap bound evaluation produced, per layer and per sample."""

    mu: float
    lipschitz: float
    layers: tuple[LayerBoundRow, ...]
    lhs: np.ndarray  # per-sample |ce gap|
    rhs: np.ndarray  # per-sample bound value
    satisfied: bool

    @property
    def lhs_mean(self) -> float:
        return float(self.lhs.mean())

    @property
    def rhs_mean(self) -> float:
        return float(self.rhs.mean())

    @property
    def min_slack(self) -> float:
        return float(np.min(self.rhs - self.lhs))

    @property
    def mean_slack(self) -> float:
        return float(np.mean(self.rhs - self.lhs))


def _check_pair(teacher: Network, student: Network):
    if teacher.num_layers != student.num_layers:
        raise ShapeError("teacher and student depths differ")
    if not isinstance(teacher.layers[-1], LinearSpec) or not isinstance(
        student.layers[-1], LinearSpec
    ):
        raise ShapeError("expected conv stacks ending in one linear layer")
    if teacher.layers[-1].weight_shape != student.layers[-1].weight_shape:
        raise ShapeError("final linear layers must share their shape")
    for spec in teacher.layers[:-1]:
        if not isinstance(spec, ConvSpec):
            raise ShapeError("bound evaluation expects conv layers before the final linear")


def _layer_contexts(teacher, student, x, keeps):
    """One congruence-aware context per conv layer, from both forward passes."""
    t_maps = forward_collect(teacher, x)
    s_maps = forward_collect(student, x)
    contexts = []
    conv_idx = teacher.conv_indices
    for pos, li in enumerate(conv_idx):
        h_t = x if li == 0 else t_maps[li - 1]
        h_s = x if li == 0 else s_maps[li - 1]
        in_keep = out_keep = None
        if keeps is not None:
            if pos > 0 and keeps[pos - 1].size != teacher.layers[conv_idx[pos - 1]].c_out:
                in_keep = keeps[pos - 1]
            if keeps[pos].size != teacher.layers[li].c_out:
                out_keep = keeps[pos]
        spec = student.layers[li]
        ctx = LayerContext(
            spec, h_t, h_s, teacher.weights[li], student.weights[li].copy(),
            in_keep, out_keep,
        )
        contexts.append(ctx)
    return contexts, t_maps[-1], s_maps[-1]


def _per_sample_sq(mat: np.ndarray, n: int) -> np.ndarray:
    c_o, total = mat.shape
    r = mat.reshape(c_o, n, total // n)
    return np.einsum("cns,cns->n", r, r)


def _student_consistency_residual(ctx: LayerContext) -> np.ndarray:
    """sigma(W_S on teacher features) minus sigma(W_S on student features)."""
    w = ctx.w_s.reshape(ctx.w_s.shape[0], -1)
    a = ctx._activate(w @ ctx.cols_t.data)
    b = ctx._activate(w @ ctx.cols_s.data)
    return a - b


def theorem_bound(teacher: Network, student: Network, mu: float, images, labels,
                  keeps=None) -> BoundReport:
    """Evaluate the cross-entropy gap bound per sample.

    The right side is the printed bound: C * obj_L plus, for each earlier
    layer, the product over k = l..L of C * C_k(mu) times obj_l, where
    obj_l is the per-sample un-squared convex objective
    mu*||corr|| + (1-mu)*||imit||, C_k(mu) mixes the spectral norms of the
    im2col weight matrices, and C is twice the final layer's spectral norm
    (the last layer is presumed shared; its teacher weights define C).
    """
    _check_pair(teacher, student)
    x = np.ascontiguousarray(images, dtype=np.float64)
    n = x.shape[0]
    contexts, logits_t, logits_s = _layer_contexts(teacher, student, x, keeps)
    big_c = lipschitz_C(teacher.weights[-1])

    rows = []
    objectives = []
    for pos, ctx in enumerate(contexts):
        norm_t = operator_norm(weight_matrix(ctx.w_t_sub))
        norm_s = operator_norm(weight_matrix(ctx.w_s))
        corr = np.sqrt(_per_sample_sq(branch_residual(ctx, "correction"), n))
        imit = np.sqrt(_per_sample_sq(branch_residual(ctx, "imitation"), n))
        obj = mu * corr + (1.0 - mu) * imit
        est_sq = _per_sample_sq(branch_residual(ctx, "estimation"), n)
        eps_t_sq = _per_sample_sq(ctx.imit_target_mat - ctx.ref_target_mat, n)
        eps_s_sq = _per_sample_sq(_student_consistency_residual(ctx), n)
        objectives.append(obj)
        rows.append(
            LayerBoundRow(
                position=pos + 1,
                norm_t=norm_t,
                norm_s=norm_s,
                c_mu=mu * norm_s + (1.0 - mu) * norm_t,
                objective_mean=float(obj.mean()),
                objective_max=float(obj.max()),
                est_error=float(est_sq.mean()),
                eps_t=float(eps_t_sq.mean()),
                eps_s=float(eps_s_sq.mean()),
            )
        )

    depth = len(contexts)
    rhs = big_c * objectives[-1]
    for l in range(depth - 1):
        coef = 1.0
        for k in range(l, depth):
            coef *= big_c * rows[k].c_mu
        rhs = rhs + coef * objectives[l]

    y = np.asarray(labels)
    lhs = np.empty(n)
    for i in range(n):
        onehot = np.zeros(logits_t.shape[1])
        onehot[int(y[i])] = 1.0
        lhs[i] = abs(
            softmax_cross_entropy(logits_t[i], onehot)
            - softmax_cross_entropy(logits_s[i], onehot)
        )
    satisfied = bool(np.all(lhs <= rhs + 1e-9))
    return BoundReport(mu, big_c, tuple(rows), lhs, rhs, satisfied)


def inconsistency_metrics(teacher: Network, student: Network, images, keeps=None):
    """Per-layer squared diagnostics on held-out data.

    Returns a list of dict rows with mean-per-sample values of the
    estimation error and the two branch inconsistencies.
    """
    _check_pair(teacher, student)
    x = np.ascontiguousarray(images, dtype=np.float64)
    n = x.shape[0]
    contexts, _, _ = _layer_contexts(teacher, student, x, keeps)
    rows = []
    for pos, ctx in enumerate(contexts):
        est = _per_sample_sq(branch_residual(ctx, "estimation"), n)
        eps_t = _per_sample_sq(ctx.imit_target_mat - ctx.ref_target_mat, n)
        eps_s = _per_sample_sq(_student_consistency_residual(ctx), n)
        rows.append(
            {
                "position": pos + 1,
                "est_error": float(est.mean()),
                "eps_t": float(eps_t.mean()),
                "eps_s": float(eps_s.mean()),
            }
        )
    return rows


def normalize_metrics(rows, reference):
    """Divide metric rows by a reference run's values (figure-style ratios).

    Zero reference entries yield ratio 0 when the value is also zero and
    inf otherwise.
    """
    out = []
    for row, ref in zip(rows, reference):
        scaled = {"position": row["position"]}
        for key in ("est_error", "eps_t", "eps_s"):
            r = ref[key]
            v = row[key]
            if r == 0.0:
                scaled[key] = 0.0 if v == 0.0 else float("inf")
            else:
                scaled[key] = v / r
        out.append(scaled)
    return out
