"""Tape, layers, and the two model stacks: gradients against central
differences, shapes against the published per-level sizes."""
import numpy as np
import pytest

from uvhand.errors import ShapeError
from uvhand.gradcheck import assert_gradients_match
from uvhand.net import (AffineNet, DEFAULT_BBOX, NetConfig, SRNet, Tensor,
                        affine_connect, backward, batchnorm, concat, conv2d,
                        default_camera, he_uniform, relu, sigmoid, toy_config,
                        upsample2x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def check_layer(build, arrays, rng, n_coords=20, rel_tol=1e-5):
    """FD-check `build`: a deterministic function of Tensors returning one
    Tensor or a list. The scalar objective is a fixed random projection of
    every output, which also exercises multi-output seeding."""
    probe = build([Tensor(a) for a in arrays])
    probe = probe if isinstance(probe, (list, tuple)) else [probe]
    projs = [rng.normal(size=o.data.shape) for o in probe]

    def fn(arrs):
        outs = build([Tensor(a) for a in arrs])
        outs = outs if isinstance(outs, (list, tuple)) else [outs]
        return sum(float((o.data * p).sum()) for o, p in zip(outs, projs))

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    outs = build(tensors)
    outs = outs if isinstance(outs, (list, tuple)) else [outs]
    backward(list(outs), projs)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]
    assert_gradients_match(fn, arrays, grads, rng, n_coords=n_coords,
                           rel_tol=rel_tol)


class TestTape:
    def test_shared_parent_accumulates(self):
        x = Tensor(np.array([[[[1.0, -2.0], [3.0, 4.0]]]]), requires_grad=True)
        y = relu(x)
        z = concat([y, y])
        backward([z], [np.ones_like(z.data)])
        # two consumers of y, relu kills the negative entry
        assert np.array_equal(x.grad, [[[[2.0, 0.0], [2.0, 2.0]]]])

    def test_seed_shape_checked(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            backward([relu(x)], [np.zeros((1, 1, 2, 3))])

    def test_no_grad_without_flag(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        out = relu(x)
        backward([out], [np.ones_like(out.data)])
        assert x.grad is None


class TestConv:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-14)

    def test_stride_two_halves(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 16, 16)))
        out = conv2d(x, Tensor(rng.normal(size=(6, 4, 3, 3))),
                     Tensor(np.zeros(6)), stride=2)
        assert out.data.shape == (1, 6, 8, 8)

    def test_matches_direct_convolution(self, rng):
        # brute-force oracle: loop over every output pixel
        x = rng.normal(size=(1, 2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros_like(out)
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    want[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))),
                   Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))

    def test_gradients(self, rng):
        arrays = [rng.normal(size=(2, 3, 6, 7)),
                  rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]
        check_layer(lambda t: conv2d(t[0], t[1], t[2]), arrays, rng)

    def test_gradients_stride_two(self, rng):
        arrays = [rng.normal(size=(1, 2, 8, 8)),
                  rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        check_layer(lambda t: conv2d(t[0], t[1], t[2], stride=2), arrays, rng)

    def test_gradients_large_kernel(self, rng):
        arrays = [rng.normal(size=(1, 2, 12, 12)),
                  rng.normal(size=(2, 2, 9, 9)), rng.normal(size=2)]
        check_layer(lambda t: conv2d(t[0], t[1], t[2], pad=4), arrays, rng)


class TestBatchnorm:
    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(4, 3, 8, 8)))
        state = {"mean": np.zeros(3), "var": np.ones(3)}
        out = batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_updated(self, rng):
        x = Tensor(rng.normal(loc=5.0, size=(8, 2, 4, 4)))
        state = {"mean": np.zeros(2), "var": np.ones(2)}
        batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)
        want = 0.1 * x.data.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(state["mean"], want, atol=1e-12)

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        state = {"mean": np.array([1.0, -1.0]), "var": np.array([4.0, 0.25])}
        out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        state, False)
        want = (x - state["mean"].reshape(1, 2, 1, 1)) / np.sqrt(
            state["var"].reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_gradients_train(self, rng):
        arrays = [rng.normal(size=(3, 2, 5, 5)),
                  rng.uniform(0.5, 1.5, size=2), rng.normal(size=2)]

        def build(t):
            state = {"mean": np.zeros(2), "var": np.ones(2)}
            return batchnorm(t[0], t[1], t[2], state, True)

        check_layer(build, arrays, rng)

    def test_gradients_eval(self, rng):
        arrays = [rng.normal(size=(2, 3, 4, 4)),
                  rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)]
        state = {"mean": rng.normal(size=3), "var": rng.uniform(0.5, 2.0, size=3)}
        check_layer(lambda t: batchnorm(t[0], t[1], t[2], state, False),
                    arrays, rng)


class TestPointwise:
    def test_relu_negative(self):
        x = Tensor(-np.ones((1, 1, 2, 2)), requires_grad=True)
        out = relu(x)
        backward([out], [np.ones_like(out.data)])
        assert (out.data == 0).all() and (x.grad == 0).all()

    def test_relu_gradients(self, rng):
        # keep samples away from the kink at 0
        x = rng.normal(size=(2, 3, 6, 6))
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        check_layer(lambda t: relu(t[0]), [x], rng)

    def test_sigmoid_range_and_extremes(self):
        out = sigmoid(Tensor(np.array([[[[-800.0, 0.0, 800.0]]]])))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.5, 1.0], atol=1e-12)

    def test_sigmoid_gradients(self, rng):
        check_layer(lambda t: sigmoid(t[0]), [rng.normal(size=(2, 2, 5, 5))], rng)

    def test_upsample_shape(self, rng):
        out = upsample2x(Tensor(rng.normal(size=(2, 3, 5, 7))))
        assert out.data.shape == (2, 3, 10, 14)

    def test_upsample_constant_preserved(self):
        out = upsample2x(Tensor(np.full((1, 1, 4, 4), 2.5)))
        np.testing.assert_allclose(out.data, 2.5, atol=1e-12)

    def test_upsample_gradients(self, rng):
        check_layer(lambda t: upsample2x(t[0]), [rng.normal(size=(1, 2, 4, 6))], rng)

    def test_concat_roundtrip_gradients(self, rng):
        arrays = [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))]
        check_layer(lambda t: concat(t), arrays, rng)


class TestAffineConnectOp:
    def test_gradients_flow_to_both(self, rng):
        cam = default_camera(32)
        uv = rng.uniform(0.25, 0.75, size=(1, 3, 6, 6))
        feat = rng.normal(size=(1, 4, 6, 6))
        check_layer(lambda t: affine_connect(t[0], t[1], cam, DEFAULT_BBOX),
                    [uv, feat], rng, n_coords=15)

    def test_output_doubles_resolution(self, rng):
        cam = default_camera(32)
        out = affine_connect(Tensor(rng.uniform(0.3, 0.7, size=(2, 3, 8, 8))),
                             Tensor(rng.normal(size=(2, 5, 8, 8))), cam,
                             DEFAULT_BBOX)
        assert out.data.shape == (2, 5, 16, 16)


class TestNetConfig:
    def test_head_resolutions(self):
        assert NetConfig().head_resolutions == (16, 32, 64, 128, 256)
        assert toy_config().head_resolutions == (4, 8, 16, 32, 64)

    def test_validation(self):
        with pytest.raises(ValueError):
            NetConfig(resolution=100)
        with pytest.raises(ValueError):
            NetConfig(encoder_channels=(64, 128, 256, 512))
        with pytest.raises(ValueError):
            NetConfig(width_multiplier=0.0)

    def test_toy_widths(self):
        cfg = toy_config()
        assert cfg.enc_widths == (4, 8, 16, 32, 64)
        assert cfg.dec_widths == (32, 16, 8, 4, 2)


# published per-level sizes (channels, height, width) at full widths
ENCODER_ROWS = {"E1": (64, 128, 128), "E2": (128, 64, 64), "E3": (256, 32, 32),
                "E4": (512, 16, 16), "E5": (1024, 8, 8)}
DECODER_ROWS = {
    "D4": (512, 16, 16), "I4": (3, 16, 16),
    "A3": (512, 32, 32), "D3": (256, 32, 32), "Ihat3": (3, 32, 32),
    "Dp3": (256, 32, 32), "I3": (3, 32, 32),
    "A2": (256, 64, 64), "D2": (128, 64, 64), "Ihat2": (3, 64, 64),
    "Dp2": (128, 64, 64), "I2": (3, 64, 64),
    "A1": (128, 128, 128), "D1": (64, 128, 128), "Ihat1": (3, 128, 128),
    "Dp1": (64, 128, 128), "I1": (3, 128, 128),
    "A0": (64, 256, 256), "D0": (32, 256, 256), "Ihat0": (3, 256, 256),
    "Dp0": (32, 256, 256), "I0": (3, 256, 256),
}


class TestAffineNetShapes:
    def test_full_width_conformance(self, rng):
        net = AffineNet(NetConfig(), rng)
        out = net.forward(rng.uniform(size=(1, 3, 256, 256)))
        for name, (c, h, w) in {**ENCODER_ROWS, **DECODER_ROWS}.items():
            assert out[name].data.shape == (1, c, h, w), name

    def test_toy_heads_five_scales(self, rng):
        cfg = toy_config()
        net = AffineNet(cfg, rng)
        out = net.forward(rng.uniform(size=(2, 3, 64, 64)))
        assert len(out["uv"]) == 5
        for head, s in zip(out["uv"], cfg.head_resolutions):
            assert head.data.shape == (2, 3, s, s)
        assert out["uv"][-1].data.shape == (2, 3, 64, 64)

    def test_heads_in_unit_interval(self, rng):
        net = AffineNet(toy_config(), rng)
        out = net.forward(rng.uniform(size=(1, 3, 64, 64)))
        for head in out["uv"]:
            assert (head.data > 0).all() and (head.data < 1).all()

    def test_input_shape_checked(self, rng):
        net = AffineNet(toy_config(), rng)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 3, 32, 32)))
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 1, 64, 64)))

    def test_mask_count_checked(self, rng):
        net = AffineNet(toy_config(), rng)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 3, 64, 64)),
                        masks=[np.ones((4, 4), bool)] * 3)

    def test_end_to_end_gradients(self, rng):
        # gradient through the whole stack at reduced size, eval-mode BN so
        # the probe stays deterministic; a few representative parameters
        cfg = NetConfig(resolution=32, width_multiplier=1.0 / 16.0)
        net = AffineNet(cfg, rng)
        image = rng.uniform(0.1, 0.9, size=(1, 3, 32, 32))
        names = ["enc1.w", "dec4.gamma", "ref0.w", "head0.b"]
        base = [net.params[n] for n in names]

        def build(t):
            for n, tensor in zip(names, t[:-1]):
                net.params[n] = tensor
            try:
                return net.forward(t[-1], training=False)["uv"]
            finally:
                for n, tensor in zip(names, base):
                    net.params[n] = tensor

        arrays = [p.data.copy() for p in base] + [image]
        check_layer(build, arrays, rng, n_coords=4)


class TestSRNet:
    def test_full_width_shapes(self, rng):
        net = SRNet(rng)
        assert net.widths == (64, 32)
        assert net.params["sr1.w"].data.shape == (64, 3, 9, 9)
        assert net.params["sr2.w"].data.shape == (32, 64, 5, 5)
        assert net.params["sr3.w"].data.shape == (3, 32, 5, 5)
        out = net.forward(rng.uniform(size=(1, 3, 256, 256)))
        assert out.data.shape == (1, 3, 256, 256)

    def test_zero_final_layer_is_identity(self, rng):
        # correction path silenced -> the residual skip passes input through
        net = SRNet(rng, width_multiplier=0.125)
        net.params["sr3.w"].data[:] = 0.0
        net.params["sr3.b"].data[:] = 0.0
        x = rng.uniform(size=(2, 3, 16, 16))
        np.testing.assert_array_equal(net.forward(x).data, x)

    def test_end_to_end_gradients(self, rng):
        net = SRNet(rng, width_multiplier=1.0 / 16.0)
        image = rng.uniform(size=(1, 3, 16, 16))
        names = ["sr1.w", "sr2.b", "sr3.w"]
        base = [net.params[n] for n in names]

        def build(t):
            for n, tensor in zip(names, t[:-1]):
                net.params[n] = tensor
            try:
                return net.forward(t[-1])
            finally:
                for n, tensor in zip(names, base):
                    net.params[n] = tensor

        arrays = [p.data.copy() for p in base] + [image]
        check_layer(build, arrays, rng, n_coords=6)

    def test_input_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            SRNet(rng, width_multiplier=0.1).forward(np.zeros((3, 16, 16)))


class TestInit:
    def test_he_uniform_bound(self, rng):
        w = he_uniform(rng, (8, 4, 3, 3))
        bound = np.sqrt(6.0 / (4 * 9))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound

    def test_bn_init(self, rng):
        net = AffineNet(toy_config(), rng)
        assert (net.params["enc1.gamma"].data == 1).all()
        assert (net.params["enc1.beta"].data == 0).all()
        assert (net.params["head0.b"].data == 0).all()
