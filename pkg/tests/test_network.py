import numpy as np
import pytest

from xdistill.errors import (
    BadMagicError,
    ChecksumError,
    PayloadLengthError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from xdistill.network import (
    ConvSpec,
    LinearSpec,
    Network,
    PruneScheme,
    WeightMask,
    apply_mask,
    build_student,
    count_params_flops,
    forward_collect,
    init_network,
    load_model,
    networks_equal,
    save_model,
    structured_keep_indices,
)
from xdistill.tensor import relu


def tiny_specs(c=1, h=8, classes=4):
    # stride-2 layers use k=4 so the output extent divides exactly
    return [
        ConvSpec(c, 3, 3, 1, 1),
        ConvSpec(3, 5, 4, 2, 1),
        LinearSpec(5 * (h // 2) * (h // 2), classes),
    ]


def random_net(seed=0, role="teacher"):
    return init_network(tiny_specs(), seed, role)


class TestForwardCollect:
    def test_zero_input_zero_maps(self):
        net = random_net()
        outs = forward_collect(net, np.zeros((2, 1, 8, 8)))
        for h in outs[:-1]:
            assert np.all(h == 0.0)
        assert np.all(outs[-1] == 0.0)  # linear bias is zero-initialized

    def test_identical_weights_identical_maps(self):
        a = random_net(seed=3)
        b = Network(a.layers, a.weights, a.biases, "student")
        x = np.random.default_rng(4).standard_normal((2, 1, 8, 8))
        for ha, hb in zip(forward_collect(a, x), forward_collect(b, x)):
            assert np.array_equal(ha, hb)

    def test_matches_layerwise_oracle(self):
        # hand-rolled forward: pad, slide, accumulate, relu, flatten, affine
        from tests.test_tensor import conv2d_loop_oracle

        net = random_net(seed=5)
        x = np.random.default_rng(6).standard_normal((2, 1, 8, 8))
        h = x
        for spec, w, b in zip(net.layers, net.weights, net.biases):
            if isinstance(spec, ConvSpec):
                h = relu(conv2d_loop_oracle(h, w, spec.stride, spec.pad))
            else:
                h = h.reshape(h.shape[0], -1) @ w.T + b
        np.testing.assert_allclose(forward_collect(net, x)[-1], h, atol=1e-9, rtol=0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            forward_collect(random_net(), np.zeros((1, 2, 8, 8)))

    def test_networks_are_immutable(self):
        net = random_net()
        with pytest.raises(ValueError):
            net.weights[0][0, 0, 0, 0] = 1.0


class TestBuildStudent:
    def test_keep_everything_identity(self):
        t = random_net(seed=7)
        scheme = PruneScheme("structured", keep_fractions=(1.0, 1.0))
        s, mask = build_student(t, scheme)
        assert s.role == "student"
        for wa, wb in zip(t.weights, s.weights):
            assert np.array_equal(wa, wb)
        assert mask.sparsity() == 0.0

    def test_forced_argmin_channel_removed(self):
        t = random_net(seed=8)
        w0 = np.zeros_like(t.weights[0])
        w0[0] = 5.0 / w0[0].size
        w0[1] = 0.1 / w0[1].size
        w0[2] = 3.0 / w0[2].size
        weights = list(t.weights)
        weights[0] = np.sign(w0) * np.abs(w0)  # L1 norms (5.0, 0.1, 3.0)
        t = t.replace_weights(weights)
        kept = structured_keep_indices(t, PruneScheme("structured", keep_fractions=(2 / 3, 1.0)))
        np.testing.assert_array_equal(kept[0], [0, 2])

    def test_survivors_match_sort_oracle(self):
        rng = np.random.default_rng(9)
        specs = [ConvSpec(2, 8, 3, 1, 1), ConvSpec(8, 8, 3, 1, 1), LinearSpec(8 * 36, 3)]
        t = init_network(specs, 10)
        scheme = PruneScheme("structured", keep_fractions=(0.5, 1.0))
        kept = structured_keep_indices(t, scheme)[0]
        norms = np.abs(t.weights[0]).sum(axis=(1, 2, 3))
        expected = np.sort(np.argsort(norms)[4:])
        np.testing.assert_array_equal(kept, expected)
        s, _ = build_student(t, scheme)
        assert s.layers[0].c_out == 4
        assert s.layers[1].c_in == 4
        np.testing.assert_array_equal(s.weights[1], t.weights[1][:, expected])

    def test_downstream_shapes_consistent(self):
        specs = [ConvSpec(1, 6, 3, 1, 1), ConvSpec(6, 6, 4, 2, 1), LinearSpec(6 * 16, 4)]
        t = init_network(specs, 11)
        s, _ = build_student(t, PruneScheme("structured", keep_fractions=(0.5, 1.0)))
        outs = forward_collect(s, np.zeros((1, 1, 8, 8)))
        assert outs[0].shape == (1, 3, 8, 8)
        assert outs[1].shape == (1, 6, 4, 4)

    def test_pruning_last_conv_rejected(self):
        t = random_net(seed=12)
        with pytest.raises(ShapeError):
            build_student(t, PruneScheme("structured", keep_fractions=(1.0, 0.5)))

    def test_zero_keep_fraction_rejected(self):
        with pytest.raises(ValueError):
            PruneScheme("structured", keep_fractions=(0.0, 1.0))

    def test_unstructured_copies_teacher(self):
        t = random_net(seed=13)
        s, mask = build_student(t, PruneScheme("unstructured", sparsity=0.9))
        assert networks_equal(t.replace_weights(t.weights, role="student"), s)
        assert all(np.all(m == 1.0) for m in mask.masks)


class TestWeightMask:
    def test_masked_values_do_not_matter(self):
        net = random_net(seed=14)
        rng = np.random.default_rng(15)
        masks = [rng.integers(0, 2, w.shape).astype(float) for w in net.weights]
        mask = WeightMask(tuple(masks))
        x = rng.standard_normal((2, 1, 8, 8))
        base = forward_collect(apply_mask(net, mask), x)[-1]
        scrambled = [
            np.where(m == 0.0, rng.standard_normal(w.shape) * 100, w)
            for w, m in zip(net.weights, mask.masks)
        ]
        other = apply_mask(net.replace_weights(scrambled), mask)
        assert np.array_equal(forward_collect(other, x)[-1], base)


class TestCountParamsFlops:
    def test_linear_convention(self):
        net = init_network([LinearSpec(10, 10)], 0)
        params, flops = count_params_flops(net, (10, 1, 1))
        assert params == 100
        assert flops == 200

    def test_conv_convention(self):
        net = init_network([ConvSpec(1, 1, 3, 1, 1)], 0)
        params, flops = count_params_flops(net, (1, 3, 3))
        assert params == 9
        assert flops == 162

    def test_halved_channels_match_symbolic_count(self):
        full = [ConvSpec(1, 8, 3, 1, 1), ConvSpec(8, 8, 3, 1, 1), LinearSpec(8 * 16, 2)]
        half = [ConvSpec(1, 4, 3, 1, 1), ConvSpec(4, 4, 3, 1, 1), LinearSpec(4 * 16, 2)]
        pf, _ = count_params_flops(init_network(full, 0), (1, 4, 4))
        ph, _ = count_params_flops(init_network(half, 0), (1, 4, 4))
        # conv params: 9*(c1 + c1*c2); linear: 16*c2*2
        expect_full = 9 * (8 + 64) + 16 * 8 * 2
        expect_half = 9 * (4 + 16) + 16 * 4 * 2
        assert (pf, ph) == (expect_full, expect_half)

    def test_mask_removes_params_not_flops(self):
        net = random_net(seed=16)
        mask = WeightMask(tuple(np.zeros_like(w) for w in net.weights))
        p0, f0 = count_params_flops(net, (1, 8, 8))
        p1, f1 = count_params_flops(net, (1, 8, 8), mask)
        assert p1 == 0 and p0 > 0
        assert f0 == f1


class TestModelFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        for seed in range(10):
            net = random_net(seed=seed, role="student" if seed % 2 else "teacher")
            path = tmp_path / f"m{seed}.xdnc"
            save_model(net, path)
            assert networks_equal(load_model(path), net)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.xdnc"
        save_model(random_net(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.xdnc"
        save_model(random_net(), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_model(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.xdnc"
        save_model(random_net(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(TruncatedPayloadError):
            load_model(path)

    def test_header_payload_disagreement(self, tmp_path):
        path = tmp_path / "m.xdnc"
        net = random_net()
        save_model(net, path)
        blob = path.read_bytes()
        # graft 16 extra payload bytes before the checksum
        patched = blob[:-8] + b"\x00" * 16 + blob[-8:]
        path.write_bytes(patched)
        with pytest.raises(PayloadLengthError):
            load_model(path)

    def test_checksum_mismatch(self, tmp_path):
        path = tmp_path / "m.xdnc"
        save_model(random_net(), path)
        blob = bytearray(path.read_bytes())
        blob[-16] ^= 0xFF  # flip a byte near the end of the payload
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_roundtrip_many_random_nets(self, tmp_path):
        rng = np.random.default_rng(17)
        for i in range(100):
            c_out = int(rng.integers(1, 5))
            specs = [ConvSpec(1, c_out, 3, 1, 1), LinearSpec(c_out * 16, 3)]
            net = init_network(specs, int(rng.integers(1 << 31)))
            p = tmp_path / "roundtrip.xdnc"
            save_model(net, p)
            assert networks_equal(load_model(p), net)
