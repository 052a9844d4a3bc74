"""Layer-wise cross distillation: the estimation, correction, imitation,
convex-combined, and soft-cross losses, their analytic gradients with
respect to the current student layer, and the front-to-back compression
loop that trains one layer at a time under a proximal regularizer.

Loss branches share one canonical pipeline (kernel matrix times cached
im2col columns), so the identity cases -- soft(1,1) = estimation,
soft(1,0) = correction, soft(0,1) = imitation, combined(1) = correction,
combined(0) = imitation -- hold bit for bit.

Channel-pruned (structured) students regress onto the true teacher
response restricted to their kept channels; the imitation branch runs the
teacher kernel restricted to the student's channel subset. Soft mixing
needs congruent feature maps and falls back to the estimation loss on
layers whose input channels were pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .network import ConvSpec, Network, PruneScheme, WeightMask, build_student, layer_forward, structured_keep_indices
from .prox import Regularizer, Schedule, project_level, prox_quant_penalty, quantize_weights, schedule_value
from .tensor import Im2ColMatrix, im2col, relu
from .trainer import AdamState, TrainConfig, adam_step, finetune

LOSS_KINDS = ("estimation", "correction", "imitation", "cross", "soft")


@dataclass(frozen=True)
class DistillConfig:
    """Knobs of one compression run (Algorithm parameters plus plumbing)."""

    mode: str = "nc"  # nc | cross | soft
    mu: float = 0.6
    alpha: float = 0.9
    beta: float = 0.3
    cross_layers: frozenset[int] | None = None  # 1-based conv positions; None = all
    iters: int = 3000
    ramp_iters: int = 1000
    lr: float = 1e-3
    regularizer: Regularizer = Regularizer("l1", 0.0)
    seed: int = 0
    finetune_epochs: int = 0
    finetune_lr: float = 1e-4
    gauss_noise: float = 0.0

    def __post_init__(self):
        if self.mode not in ("nc", "cross", "soft"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("mu", "alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.iters > 0 and not 1 <= self.ramp_iters <= self.iters:
            raise ValueError("need 1 <= ramp_iters <= iters")


@dataclass(eq=False)
class LayerContext:
    """Frozen inputs of one layer's distillation plus the trainable kernel.

    ``h_prev_t`` keeps the teacher's channel coordinates; ``h_prev_s`` the
    student's. ``in_keep``/``out_keep`` map student channels onto teacher
    channels for structured students (None means identity). ``w_s`` is the
    only field a training loop reassigns; everything derived from the
    frozen fields is cached.
    """

    spec: ConvSpec
    h_prev_t: np.ndarray
    h_prev_s: np.ndarray
    w_t: np.ndarray
    w_s: np.ndarray
    in_keep: np.ndarray | None = None
    out_keep: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.h_prev_t.shape[0] != self.h_prev_s.shape[0]:
            raise ShapeError("teacher/student batches differ in sample count")
        if self.in_keep is None and self.h_prev_t.shape != self.h_prev_s.shape:
            raise ShapeError(
                "congruent context requires matching feature shapes; pass in_keep"
            )
        if self.w_s.shape != self.spec.weight_shape:
            raise ShapeError(f"student kernel {self.w_s.shape} != {self.spec.weight_shape}")

    @property
    def n(self) -> int:
        return self.h_prev_s.shape[0]

    @property
    def congruent(self) -> bool:
        return self.in_keep is None

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def w_t_out(self) -> np.ndarray:
        """Teacher kernel restricted to the student's output channels."""
        return self._get(
            "w_t_out",
            lambda: self.w_t if self.out_keep is None else self.w_t[self.out_keep],
        )

    @property
    def w_t_sub(self) -> np.ndarray:
        """Teacher kernel restricted to student output and input channels."""
        return self._get(
            "w_t_sub",
            lambda: self.w_t_out if self.in_keep is None
            else np.ascontiguousarray(self.w_t_out[:, self.in_keep]),
        )

    @property
    def cols_s(self) -> Im2ColMatrix:
        s = self.spec
        return self._get("cols_s", lambda: im2col(self.h_prev_s, s.k, s.stride, s.pad))

    @property
    def cols_t_full(self) -> Im2ColMatrix:
        s = self.spec
        return self._get(
            "cols_t_full", lambda: im2col(self.h_prev_t, s.k, s.stride, s.pad)
        )

    @property
    def cols_t(self) -> Im2ColMatrix:
        """Columns of the teacher map in student input coordinates."""
        if self.in_keep is None:
            return self.cols_t_full
        s = self.spec
        return self._get(
            "cols_t",
            lambda: im2col(self.h_prev_t[:, self.in_keep], s.k, s.stride, s.pad),
        )

    def _activate(self, z: np.ndarray) -> np.ndarray:
        return relu(z) if self.spec.activation == "relu" else z

    @property
    def ref_target_mat(self) -> np.ndarray:
        """True teacher branch on its own features, as a (c_out, cols) matrix."""
        def build():
            w = self.w_t_out
            return self._activate(w.reshape(w.shape[0], -1) @ self.cols_t_full.data)

        return self._get("ref_target_mat", build)

    @property
    def imit_target_mat(self) -> np.ndarray:
        """Restricted teacher branch driven by the student's features."""
        def build():
            w = self.w_t_sub
            return self._activate(w.reshape(w.shape[0], -1) @ self.cols_s.data)

        return self._get("imit_target_mat", build)

    def soft_pieces(self, alpha: float, beta: float):
        """(target matrix, student columns) for the soft-cross loss."""
        if not self.congruent:
            raise ShapeError("soft mixing requires congruent feature maps")
        key = ("soft", alpha, beta)

        def build():
            ht_hat, hs_hat = cross_mix(self.h_prev_t, self.h_prev_s, alpha, beta)
            if alpha == 1.0:
                target = self.ref_target_mat
            elif alpha == 0.0:
                target = self.imit_target_mat
            else:
                s = self.spec
                cols = im2col(ht_hat, s.k, s.stride, s.pad)
                w = self.w_t_out
                target = self._activate(w.reshape(w.shape[0], -1) @ cols.data)
            if beta == 1.0:
                cols_s = self.cols_s
            elif beta == 0.0:
                cols_s = self.cols_t
            else:
                s = self.spec
                cols_s = im2col(hs_hat, s.k, s.stride, s.pad)
            return target, cols_s

        return self._get(key, build)


def cross_mix(h_t, h_s, alpha: float, beta: float):
    """Convex cross connection of congruent feature maps.

    Returns (alpha*h_t + (1-alpha)*h_s, (1-beta)*h_t + beta*h_s); exact
    endpoint values short-circuit to the original arrays so downstream
    losses reproduce the pure variants bit for bit.
    """
    if h_t.shape != h_s.shape:
        raise ShapeError(f"cross_mix needs congruent maps, got {h_t.shape} vs {h_s.shape}")
    if h_t is h_s:
        return h_t, h_s  # any convex mix of a map with itself is the map
    if alpha == 1.0:
        ht_hat = h_t
    elif alpha == 0.0:
        ht_hat = h_s
    else:
        ht_hat = alpha * h_t + (1.0 - alpha) * h_s
    if beta == 1.0:
        hs_hat = h_s
    elif beta == 0.0:
        hs_hat = h_t
    else:
        hs_hat = (1.0 - beta) * h_t + beta * h_s
    return ht_hat, hs_hat


def _student_mats(ctx: LayerContext, cols: Im2ColMatrix):
    z = ctx.w_s.reshape(ctx.w_s.shape[0], -1) @ cols.data
    return z, ctx._activate(z)


def _pieces(ctx: LayerContext, kind: str, alpha=None, beta=None):
    if kind == "estimation":
        return ctx.ref_target_mat, ctx.cols_s
    if kind == "correction":
        return ctx.ref_target_mat, ctx.cols_t
    if kind == "imitation":
        return ctx.imit_target_mat, ctx.cols_s
    if kind == "soft":
        return ctx.soft_pieces(alpha, beta)
    raise ValueError(f"no branch pieces for kind {kind!r}")


def _branch_loss(ctx: LayerContext, kind: str, alpha=None, beta=None) -> float:
    target, cols = _pieces(ctx, kind, alpha, beta)
    _, s = _student_mats(ctx, cols)
    r = s - target
    return float(np.sum(r * r) / ctx.n)


def branch_residual(ctx: LayerContext, kind: str, alpha=None, beta=None) -> np.ndarray:
    """Raw branch residual (student minus target) as a (c_out, n*hw) matrix.

    Consumed by the bound evaluator, which needs per-sample norms rather
    than the batch-mean squared loss.
    """
    target, cols = _pieces(ctx, kind, alpha, beta)
    _, s = _student_mats(ctx, cols)
    return s - target


def estimation_loss(ctx: LayerContext) -> float:
    """Squared distance between teacher and student branch outputs, each on
    its own previous feature map; mean over the batch."""
    return _branch_loss(ctx, "estimation")


def correction_loss(ctx: LayerContext) -> float:
    """Both branches consume the teacher's previous feature map."""
    return _branch_loss(ctx, "correction")


def imitation_loss(ctx: LayerContext) -> float:
    """Both branches consume the student's previous feature map."""
    return _branch_loss(ctx, "imitation")


def combined_loss(ctx: LayerContext, mu: float) -> float:
    """Convex combination mu*correction + (1-mu)*imitation."""
    if mu == 1.0:
        return correction_loss(ctx)
    if mu == 0.0:
        return imitation_loss(ctx)
    return mu * correction_loss(ctx) + (1.0 - mu) * imitation_loss(ctx)


def soft_cross_loss(ctx: LayerContext, alpha: float, beta: float) -> float:
    """Estimation loss evaluated after the soft cross connection."""
    return _branch_loss(ctx, "soft", alpha, beta)


def _grad_single(ctx: LayerContext, kind: str, alpha=None, beta=None):
    target, cols = _pieces(ctx, kind, alpha, beta)
    z, s = _student_mats(ctx, cols)
    r = s - target
    loss = float(np.sum(r * r) / ctx.n)
    dz = (2.0 / ctx.n) * r
    if ctx.spec.activation == "relu":
        dz = dz * (z > 0.0)
    grad = (dz @ cols.data.T).reshape(ctx.w_s.shape)
    return loss, grad


def loss_and_grad(ctx: LayerContext, kind: str, mu=0.5, alpha=0.9, beta=0.3):
    """Loss value and its exact gradient w.r.t. the student kernel.

    Gradients use the relu subgradient convention relu'(0) = 0; the
    teacher branch and all previous layers are frozen.
    """
    if kind == "cross":
        if mu == 1.0:
            return _grad_single(ctx, "correction")
        if mu == 0.0:
            return _grad_single(ctx, "imitation")
        lc, gc = _grad_single(ctx, "correction")
        li, gi = _grad_single(ctx, "imitation")
        return mu * lc + (1.0 - mu) * li, mu * gc + (1.0 - mu) * gi
    if kind == "soft":
        return _grad_single(ctx, "soft", alpha, beta)
    if kind in ("estimation", "correction", "imitation"):
        return _grad_single(ctx, kind)
    raise ValueError(f"unknown loss kind {kind!r}")


def layer_loss_grad(ctx: LayerContext, kind: str, mu=0.5, alpha=0.9, beta=0.3) -> np.ndarray:
    """Gradient of the selected loss w.r.t. ``ctx.w_s`` (see loss_and_grad)."""
    return loss_and_grad(ctx, kind, mu, alpha, beta)[1]


def _sparsity(w: np.ndarray) -> float:
    return 1.0 - float(np.count_nonzero(w)) / w.size


def distill_layer(ctx: LayerContext, cfg: DistillConfig, kind: str, layer_pos: int = 0):
    """Train one layer: {gradient, Adam step, scheduled prox} for cfg.iters.

    Returns (final weights, per-iteration log rows). Log rows are
    (iter, loss, sparsity, lr); the loss is evaluated at the pre-update
    weights of that iteration. For lazy quantization the gradient is taken
    at the projected weights and applied to a latent full-precision copy
    (straight-through); the returned weights are the projected ones.
    """
    reg = cfg.regularizer
    w = ctx.w_s.copy()
    latent = w.copy()
    prune_kind = reg.kind if reg.kind in ("l1", "group21") else None
    sched = None
    if prune_kind and reg.target_sparsity > 0.0 and cfg.iters > 0:
        sched = Schedule(reg.target_sparsity, cfg.ramp_iters, cfg.iters)
    state = AdamState(lr=cfg.lr)
    rows = []
    for t in range(1, cfg.iters + 1):
        if reg.kind == "quant_project":
            ctx.w_s = quantize_weights(latent, reg.bits)
            loss, grad = loss_and_grad(ctx, kind, cfg.mu, cfg.alpha, cfg.beta)
            latent = adam_step(state, [latent], [grad])[0]
            w = latent
        else:
            ctx.w_s = w
            loss, grad = loss_and_grad(ctx, kind, cfg.mu, cfg.alpha, cfg.beta)
            w = adam_step(state, [w], [grad])[0]
            if sched is not None:
                level = schedule_value(sched, t)
                if level > 0.0:
                    w, _ = project_level(w, level, prune_kind)
            elif reg.kind == "quant_penalty":
                w = prox_quant_penalty(w, reg.bits, reg.penalty_weight)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at layer {layer_pos}, iteration {t}")
        rows.append((t, loss, _sparsity(w), cfg.lr))
    if cfg.iters > 0:
        if reg.kind == "quant_project":
            w = quantize_weights(latent, reg.bits)
        elif reg.kind == "quant_penalty":
            w = quantize_weights(w, reg.bits)  # final hard projection
    ctx.w_s = w
    return w, rows


def loss_kind_for_layer(cfg: DistillConfig, position: int, congruent: bool) -> str:
    """Per-layer loss selection: cross/soft only on configured positions.

    ``position`` is the 1-based index among conv layers. Layers outside
    ``cross_layers`` fall back to the plain estimation loss, as does soft
    mixing on structurally incongruent layers.
    """
    if cfg.mode == "nc":
        return "estimation"
    in_set = cfg.cross_layers is None or position in cfg.cross_layers
    if not in_set:
        return "estimation"
    if cfg.mode == "cross":
        return "cross"
    return "soft" if congruent else "estimation"


@dataclass
class CompressReport:
    """Per-layer outcome plus the full iteration logs of one run."""

    layer_rows: list  # (position, loss_kind, final_loss, sparsity, iters)
    iter_rows: list  # (position, iter, loss, sparsity, lr)
    finetune_rows: list  # (iteration, loss, train_acc)


def compress_network(teacher: Network, kshot, cfg: DistillConfig, scheme: PruneScheme):
    """Run the full layer-by-layer compression (Algorithm workflow).

    Layers are distilled front to back; after a layer finishes, its weights
    freeze and the student's stored feature maps are recomputed with the
    student's own outputs before the next layer starts. The final linear
    layer is copied from the teacher. Returns (student, mask, report).
    """
    x = np.ascontiguousarray(kshot.images, dtype=np.float64)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    from .network import forward_collect

    t_maps = forward_collect(teacher, x)
    student, mask = build_student(teacher, scheme)
    kept = None
    if scheme.kind == "structured":
        kept = structured_keep_indices(teacher, scheme)

    weights = [w.copy() for w in student.weights]
    masks = [np.ones_like(w) for w in student.weights]
    conv_idx = teacher.conv_indices
    h_s_prev = x
    layer_rows, iter_rows = [], []
    for pos, li in enumerate(conv_idx):
        position = pos + 1
        h_t_prev = x if li == 0 else t_maps[li - 1]
        spec = student.layers[li]
        if li in scheme.skip_layers:
            layer_rows.append((position, "skipped", 0.0, _sparsity(weights[li]), 0))
            h_s_prev = layer_forward(spec, weights[li], None, h_s_prev)
            continue
        in_keep = out_keep = None
        if kept is not None:
            if pos > 0 and kept[pos - 1].size != teacher.layers[conv_idx[pos - 1]].c_out:
                in_keep = kept[pos - 1]
            if kept[pos].size != teacher.layers[li].c_out:
                out_keep = kept[pos]
        h_s_used = h_s_prev
        if cfg.gauss_noise > 0.0 and pos > 0:
            from .data import gaussian_feature_noise

            h_s_used = gaussian_feature_noise(h_s_prev, cfg.gauss_noise, cfg.seed + li)
        ctx = LayerContext(spec, h_t_prev, h_s_used, teacher.weights[li], weights[li],
                           in_keep, out_keep)
        kind = loss_kind_for_layer(cfg, position, ctx.congruent)
        w_final, rows = distill_layer(ctx, cfg, kind, layer_pos=position)
        weights[li] = w_final
        if scheme.kind == "unstructured" and cfg.regularizer.kind in ("l1", "group21"):
            masks[li] = (w_final != 0.0).astype(np.float64)
        final_loss = _branch_loss_for_kind(ctx, kind, cfg)
        layer_rows.append((position, kind, final_loss, _sparsity(w_final), len(rows)))
        iter_rows.extend((position, *row) for row in rows)
        h_s_prev = layer_forward(spec, w_final, None, h_s_prev)

    # final linear layer stays the teacher's, un-pruned
    li = teacher.num_layers - 1
    weights[li] = teacher.weights[li].copy()
    biases = list(student.biases)
    biases[li] = None if teacher.biases[li] is None else teacher.biases[li].copy()
    student = student.replace_weights(weights, biases, role="student")
    mask = WeightMask(tuple(masks))

    finetune_rows = []
    if cfg.finetune_epochs > 0:
        ft_cfg = TrainConfig(
            lr=cfg.finetune_lr, epochs=cfg.finetune_epochs, seed=cfg.seed
        )
        student, finetune_rows = finetune(student, mask, kshot, ft_cfg)
    return student, mask, CompressReport(layer_rows, iter_rows, finetune_rows)


def _branch_loss_for_kind(ctx: LayerContext, kind: str, cfg: DistillConfig) -> float:
    if kind == "cross":
        return combined_loss(ctx, cfg.mu)
    if kind == "soft":
        return soft_cross_loss(ctx, cfg.alpha, cfg.beta)
    return _branch_loss(ctx, kind)
