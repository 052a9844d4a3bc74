import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from xdistill.distill import (
    CompressReport,
    DistillConfig,
    LayerContext,
    combined_loss,
    compress_network,
    correction_loss,
    cross_mix,
    distill_layer,
    estimation_loss,
    imitation_loss,
    layer_loss_grad,
    loss_and_grad,
    soft_cross_loss,
)
from xdistill.errors import ShapeError
from xdistill.network import ConvSpec, LinearSpec, PruneScheme, forward_collect, init_network, networks_equal
from xdistill.prox import Regularizer
from xdistill.tensor import relu


def make_ctx(seed=0, n=3, c_in=2, c_out=4, hw=5, k=3, stride=1, pad=1, shift=0.0):
    """Random congruent context; `shift` biases the maps away from relu kinks."""
    rng = np.random.default_rng(seed)
    spec = ConvSpec(c_in, c_out, k, stride, pad)
    h_t = rng.standard_normal((n, c_in, hw, hw)) + shift
    h_s = rng.standard_normal((n, c_in, hw, hw)) + shift
    w_t = rng.standard_normal(spec.weight_shape) * 0.5
    w_s = rng.standard_normal(spec.weight_shape) * 0.5
    return LayerContext(spec, h_t, h_s, w_t, w_s)


def direct_loss_oracle(spec, w_t, w_s, h_for_t, h_for_s, n):
    """Elementwise recomputation with the loop-nest conv from test_tensor."""
    from tests.test_tensor import conv2d_loop_oracle

    a = relu(conv2d_loop_oracle(h_for_t, w_t, spec.stride, spec.pad))
    b = relu(conv2d_loop_oracle(h_for_s, w_s, spec.stride, spec.pad))
    return float(np.sum((a - b) ** 2) / n)


class TestLossValues:
    def test_estimation_zero_at_match(self):
        ctx = make_ctx(seed=1)
        matched = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_t, ctx.w_t, ctx.w_t.copy())
        assert estimation_loss(matched) == 0.0

    def test_estimation_closed_form(self):
        # teacher branch all 2s, student branch relu'd to 0
        n = 4
        spec = ConvSpec(1, 1, 1, 1, 0)
        h = np.ones((n, 1, 3, 3))
        w_t = np.full((1, 1, 1, 1), 2.0)
        w_s = np.full((1, 1, 1, 1), -1.0)
        ctx = LayerContext(spec, h, h, w_t, w_s)
        m = n * 9
        assert estimation_loss(ctx) == pytest.approx(4.0 * m / n)

    def test_estimation_matches_direct_oracle(self):
        ctx = make_ctx(seed=2)
        expected = direct_loss_oracle(ctx.spec, ctx.w_t, ctx.w_s, ctx.h_prev_t, ctx.h_prev_s, ctx.n)
        assert estimation_loss(ctx) == pytest.approx(expected, abs=1e-10)

    def test_correction_zero_for_equal_weights(self):
        ctx = make_ctx(seed=3)
        same = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_s, ctx.w_t, ctx.w_t.copy())
        assert correction_loss(same) == 0.0

    def test_correction_ignores_student_map_bitwise(self):
        ctx = make_ctx(seed=4)
        a = correction_loss(ctx)
        other = LayerContext(
            ctx.spec, ctx.h_prev_t, ctx.h_prev_s + 17.0, ctx.w_t, ctx.w_s
        )
        assert correction_loss(other) == a

    def test_correction_matches_direct_oracle(self):
        ctx = make_ctx(seed=5)
        expected = direct_loss_oracle(ctx.spec, ctx.w_t, ctx.w_s, ctx.h_prev_t, ctx.h_prev_t, ctx.n)
        assert correction_loss(ctx) == pytest.approx(expected, abs=1e-10)

    def test_imitation_zero_for_equal_weights(self):
        ctx = make_ctx(seed=6)
        same = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_s, ctx.w_t, ctx.w_t.copy())
        assert imitation_loss(same) == 0.0

    def test_imitation_ignores_teacher_map_bitwise(self):
        ctx = make_ctx(seed=7)
        a = imitation_loss(ctx)
        other = LayerContext(ctx.spec, ctx.h_prev_t * 3.0 + 1.0, ctx.h_prev_s, ctx.w_t, ctx.w_s)
        assert imitation_loss(other) == a

    def test_imitation_matches_direct_oracle(self):
        ctx = make_ctx(seed=8)
        expected = direct_loss_oracle(ctx.spec, ctx.w_t, ctx.w_s, ctx.h_prev_s, ctx.h_prev_s, ctx.n)
        assert imitation_loss(ctx) == pytest.approx(expected, abs=1e-10)

    def test_all_losses_nonnegative_and_zero_at_match(self):
        for seed in range(5):
            ctx = make_ctx(seed=seed)
            assert estimation_loss(ctx) >= 0.0
            assert correction_loss(ctx) >= 0.0
            assert imitation_loss(ctx) >= 0.0
            matched = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_t, ctx.w_t, ctx.w_t.copy())
            for fn in (estimation_loss, correction_loss, imitation_loss):
                assert fn(matched) == 0.0
            assert combined_loss(matched, 0.37) == 0.0
            assert soft_cross_loss(matched, 0.4, 0.8) == 0.0


class TestCombined:
    def test_endpoints_bitwise(self):
        ctx = make_ctx(seed=9)
        assert combined_loss(ctx, 1.0) == correction_loss(ctx)
        assert combined_loss(ctx, 0.0) == imitation_loss(ctx)

    def test_midpoint_is_mean(self):
        ctx = make_ctx(seed=10)
        mid = combined_loss(ctx, 0.5)
        mean = 0.5 * (correction_loss(ctx) + imitation_loss(ctx))
        assert mid == pytest.approx(mean, abs=1e-12)


class TestCrossMix:
    def test_identity_endpoints(self):
        rng = np.random.default_rng(11)
        h_t = rng.standard_normal((2, 3, 4, 4))
        h_s = rng.standard_normal((2, 3, 4, 4))
        ht_hat, hs_hat = cross_mix(h_t, h_s, 1.0, 1.0)
        assert ht_hat is h_t and hs_hat is h_s

    def test_full_cross(self):
        rng = np.random.default_rng(12)
        h_t = rng.standard_normal((1, 1, 2, 2))
        h_s = rng.standard_normal((1, 1, 2, 2))
        ht_hat, hs_hat = cross_mix(h_t, h_s, 0.0, 1.0)
        assert ht_hat is h_s and hs_hat is h_s
        ht_hat, hs_hat = cross_mix(h_t, h_s, 1.0, 0.0)
        assert ht_hat is h_t and hs_hat is h_t

    def test_general_mix_values(self):
        h_t = np.full((1, 1, 1, 1), 2.0)
        h_s = np.full((1, 1, 1, 1), 4.0)
        ht_hat, hs_hat = cross_mix(h_t, h_s, 0.75, 0.25)
        assert ht_hat[0, 0, 0, 0] == pytest.approx(2.5)
        assert hs_hat[0, 0, 0, 0] == pytest.approx(2.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            cross_mix(np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2, 2)), 0.5, 0.5)


class TestLossIdentities:
    def test_identity_suite_bitwise(self):
        for seed in range(50):
            ctx = make_ctx(seed=100 + seed, n=2, hw=4)
            assert soft_cross_loss(ctx, 1.0, 1.0) == estimation_loss(ctx)
            assert soft_cross_loss(ctx, 1.0, 0.0) == correction_loss(ctx)
            assert soft_cross_loss(ctx, 0.0, 1.0) == imitation_loss(ctx)
            assert combined_loss(ctx, 1.0) == correction_loss(ctx)
            assert combined_loss(ctx, 0.0) == imitation_loss(ctx)


def fd_loss_grad(ctx, loss_fn, h=1e-5):
    w = ctx.w_s
    g = np.zeros_like(w)
    flat = w.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(ctx)
        flat[i] = orig - h
        down = loss_fn(ctx)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def margin_ok(ctx, kinds, h=1e-5):
    """No pre-activation within 50h of the relu kink for any branch."""
    from xdistill.distill import _pieces, _student_mats

    for kind in kinds:
        if kind == "cross":
            sub = ("correction", "imitation")
        elif kind == "soft":
            sub = (("soft", 0.9, 0.3),)
        else:
            sub = (kind,)
        for s in sub:
            args = s if isinstance(s, tuple) else (s,)
            target, cols = _pieces(ctx, *args)
            z, _ = _student_mats(ctx, cols)
            if np.min(np.abs(z)) < 50 * h:
                return False
    return True


def find_fd_ctx(kinds, start_seed=0):
    seed = start_seed
    while True:
        ctx = make_ctx(seed=seed, n=2, c_in=2, c_out=3, hw=4, shift=0.3)
        ctx._cache.clear()
        if margin_ok(ctx, kinds):
            return ctx
        seed += 1


class TestGradients:
    KINDS = ("estimation", "correction", "imitation", "cross", "soft")

    def test_zero_gradient_at_global_minimum(self):
        ctx = make_ctx(seed=13)
        matched = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_t, ctx.w_t, ctx.w_t.copy())
        for kind in self.KINDS:
            g = layer_loss_grad(matched, kind, mu=0.6, alpha=0.9, beta=0.3)
            assert np.all(g == 0.0)

    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_finite_differences(self, kind):
        ctx = find_fd_ctx(self.KINDS, start_seed=40)
        mu, alpha, beta = 0.6, 0.9, 0.3
        analytic = layer_loss_grad(ctx, kind, mu=mu, alpha=alpha, beta=beta)

        def loss_fn(c):
            c._cache.pop(("soft", alpha, beta), None)
            if kind == "cross":
                return combined_loss(c, mu)
            if kind == "soft":
                return soft_cross_loss(c, alpha, beta)
            return {"estimation": estimation_loss,
                    "correction": correction_loss,
                    "imitation": imitation_loss}[kind](c)

        numeric = fd_loss_grad(ctx, loss_fn)
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        assert np.all(err <= 1e-5 * scale + 1e-9)

    def test_combined_grad_linearity(self):
        ctx = make_ctx(seed=14)
        mu = 0.37
        g = layer_loss_grad(ctx, "cross", mu=mu)
        gc = layer_loss_grad(ctx, "correction")
        gi = layer_loss_grad(ctx, "imitation")
        np.testing.assert_allclose(g, mu * gc + (1 - mu) * gi, atol=1e-12)


class TestDistillLayer:
    def test_identity_when_matched_and_unregularized(self):
        ctx = make_ctx(seed=15)
        matched = LayerContext(ctx.spec, ctx.h_prev_t, ctx.h_prev_t, ctx.w_t, ctx.w_t.copy())
        cfg = DistillConfig(mode="nc", iters=20, ramp_iters=5, lr=1e-3)
        w, rows = distill_layer(matched, cfg, "estimation")
        np.testing.assert_allclose(w, ctx.w_t, atol=1e-12)
        assert all(r[1] == 0.0 for r in rows)

    def test_zero_iters_returns_init(self):
        ctx = make_ctx(seed=16)
        w0 = ctx.w_s.copy()
        cfg = DistillConfig(mode="nc", iters=0, ramp_iters=1)
        w, rows = distill_layer(ctx, cfg, "estimation")
        assert rows == []
        np.testing.assert_array_equal(w, w0)

    def test_unstructured_sparsity_exact(self):
        ctx = make_ctx(seed=17)
        cfg = DistillConfig(
            mode="nc", iters=30, ramp_iters=10, lr=1e-3,
            regularizer=Regularizer("l1", target_sparsity=0.5),
        )
        w, _ = distill_layer(ctx, cfg, "estimation")
        assert int(np.sum(w == 0.0)) == int(np.ceil(0.5 * w.size))

    def test_group_sparsity_exact(self):
        ctx = make_ctx(seed=18)
        cfg = DistillConfig(
            mode="nc", iters=30, ramp_iters=10, lr=1e-3,
            regularizer=Regularizer("group21", target_sparsity=0.5),
        )
        w, _ = distill_layer(ctx, cfg, "estimation")
        gz = int(np.sum(np.all(w.reshape(w.shape[0], -1) == 0.0, axis=1)))
        assert gz == int(np.ceil(0.5 * w.shape[0]))

    def test_quant_project_returns_grid_values(self):
        ctx = make_ctx(seed=19)
        cfg = DistillConfig(
            mode="nc", iters=25, ramp_iters=5, lr=1e-3,
            regularizer=Regularizer("quant_project", bits=2),
        )
        w, _ = distill_layer(ctx, cfg, "estimation")
        assert np.unique(w).size <= 3

    def test_quant_penalty_returns_grid_values(self):
        ctx = make_ctx(seed=20)
        cfg = DistillConfig(
            mode="nc", iters=25, ramp_iters=5, lr=1e-3,
            regularizer=Regularizer("quant_penalty", bits=3, penalty_weight=0.5),
        )
        w, _ = distill_layer(ctx, cfg, "estimation")
        assert np.unique(w).size <= 7


def desk_teacher(seed=21):
    specs = [
        ConvSpec(1, 4, 3, 1, 1),
        ConvSpec(4, 6, 4, 2, 1),
        LinearSpec(6 * 16, 3),
    ]
    return init_network(specs, seed)


def tiny_batch(seed=22, n=6, shape=(1, 8, 8)):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, *shape))
    labels = rng.integers(0, 3, n)
    from types import SimpleNamespace

    return SimpleNamespace(images=images, labels=labels)


class TestCompressNetwork:
    def test_identity_scheme_reproduces_teacher(self):
        teacher = desk_teacher()
        batch = tiny_batch()
        cfg = DistillConfig(mode="nc", iters=10, ramp_iters=5, lr=1e-4)
        student, mask, report = compress_network(
            teacher, batch, cfg, PruneScheme("unstructured", sparsity=0.0)
        )
        for a, b in zip(student.weights, teacher.weights):
            np.testing.assert_allclose(a, b, atol=1e-12)
        assert all(row[2] == pytest.approx(0.0, abs=1e-20) for row in report.layer_rows)
        assert mask.sparsity() == 0.0

    def test_empty_cross_set_falls_back_to_nc_bitwise(self):
        teacher = desk_teacher(seed=23)
        batch = tiny_batch(seed=24)
        reg = Regularizer("l1", target_sparsity=0.4)
        base = dict(iters=15, ramp_iters=5, lr=1e-3, regularizer=reg)
        nc_cfg = DistillConfig(mode="nc", **base)
        cross_cfg = DistillConfig(mode="cross", mu=0.6, cross_layers=frozenset(), **base)
        s1, _, _ = compress_network(teacher, batch, nc_cfg, PruneScheme("unstructured"))
        s2, _, _ = compress_network(teacher, batch, cross_cfg, PruneScheme("unstructured"))
        for a, b in zip(s1.weights, s2.weights):
            assert np.array_equal(a, b)

    def test_skip_layers_left_untouched(self):
        teacher = desk_teacher(seed=25)
        batch = tiny_batch(seed=26)
        cfg = DistillConfig(mode="nc", iters=10, ramp_iters=5, lr=1e-3,
                            regularizer=Regularizer("l1", target_sparsity=0.5))
        scheme = PruneScheme("unstructured", sparsity=0.5, skip_layers=frozenset({0}))
        student, mask, _ = compress_network(teacher, batch, cfg, scheme)
        assert np.array_equal(student.weights[0], teacher.weights[0])
        assert np.all(mask.masks[0] == 1.0)
        assert np.any(student.weights[1] == 0.0)

    def test_final_linear_copied(self):
        teacher = desk_teacher(seed=27)
        batch = tiny_batch(seed=28)
        cfg = DistillConfig(mode="cross", iters=10, ramp_iters=5, lr=1e-3,
                            regularizer=Regularizer("l1", target_sparsity=0.7))
        student, _, _ = compress_network(teacher, batch, cfg, PruneScheme("unstructured"))
        assert np.array_equal(student.weights[-1], teacher.weights[-1])
        assert np.array_equal(student.biases[-1], teacher.biases[-1])

    def test_structured_compress_runs_all_modes(self):
        teacher = desk_teacher(seed=29)
        batch = tiny_batch(seed=30)
        scheme = PruneScheme("structured", keep_fractions=(0.5, 1.0))
        for mode in ("nc", "cross", "soft"):
            cfg = DistillConfig(mode=mode, iters=8, ramp_iters=4, lr=1e-3)
            student, _, report = compress_network(teacher, batch, cfg, scheme)
            assert student.layers[0].c_out == 2
            outs = forward_collect(student, batch.images)
            assert outs[-1].shape == (6, 3)

    def test_finetune_preserves_mask(self):
        teacher = desk_teacher(seed=31)
        batch = tiny_batch(seed=32)
        cfg = DistillConfig(mode="nc", iters=10, ramp_iters=5, lr=1e-3,
                            regularizer=Regularizer("l1", target_sparsity=0.6),
                            finetune_epochs=5, finetune_lr=1e-4)
        student, mask, report = compress_network(teacher, batch, cfg, PruneScheme("unstructured"))
        assert len(report.finetune_rows) == 5
        for w, m in zip(student.weights, mask.masks):
            assert np.all(w[m == 0.0] == 0.0)


def reference_nc_compress(teacher, x, iters, lr, sparsity, ramp):
    """Independent single-file reimplementation of NC layer-wise compression.

    Uses sliding-window einsum convolutions, its own Adam, and its own
    exact-count soft threshold; written against the update equations, not
    the library code.
    """

    def conv(w, h, stride, pad):
        hp = np.pad(h, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(hp, (w.shape[2], w.shape[3]), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        return np.einsum("ncyxij,ocij->noyx", win, w)

    def wgrad(h, dz, w_shape, stride, pad):
        hp = np.pad(h, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(hp, (w_shape[2], w_shape[3]), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        return np.einsum("ncyxij,noyx->ocij", win, dz)

    h_t = x
    h_s = x
    n = x.shape[0]
    out_weights = []
    for li, spec in enumerate(teacher.layers[:-1]):
        w_t = teacher.weights[li]
        target = np.maximum(conv(w_t, h_t, spec.stride, spec.pad), 0.0)
        w = w_t.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        for t in range(1, iters + 1):
            z = conv(w, h_s, spec.stride, spec.pad)
            s = np.maximum(z, 0.0)
            dz = (2.0 / n) * (s - target) * (z > 0.0)
            g = wgrad(h_s, dz, w.shape, spec.stride, spec.pad)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            level = sparsity * min(t / ramp, 1.0)
            count = int(np.ceil(level * w.size))
            if count > 0:
                flat = np.abs(w).reshape(-1)
                order = np.argsort(flat, kind="stable")
                kept = w.reshape(-1).copy()
                kept[order[:count]] = 0.0
                w = kept.reshape(w.shape)
        out_weights.append(w)
        h_t = np.maximum(conv(w_t, h_t, spec.stride, spec.pad), 0.0)
        h_s = np.maximum(conv(w, h_s, spec.stride, spec.pad), 0.0)
    return out_weights


class TestDualImplementation:
    def test_nc_mode_matches_reference(self):
        teacher = desk_teacher(seed=33)
        batch = tiny_batch(seed=34, n=4)
        cfg = DistillConfig(
            mode="nc", iters=50, ramp_iters=20, lr=1e-3,
            regularizer=Regularizer("l1", target_sparsity=0.5),
        )
        student, _, _ = compress_network(
            teacher, batch, cfg, PruneScheme("unstructured", sparsity=0.5)
        )
        ref = reference_nc_compress(teacher, batch.images, 50, 1e-3, 0.5, 20)
        for got, want in zip(student.weights[:-1], ref):
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)
