import math

import numpy as np
import pytest

from forgetd import kernels
from forgetd.errors import ConfigError, InputError, UsageError
from forgetd.nn import (
    Arch,
    AdamState,
    ModelParams,
    adam_step,
    build_model,
    conv2d,
    convnet,
    dense,
    flatten,
    forward,
    loss_and_grads,
    maxpool2d,
    mlp,
    one_hot,
    param_axpy,
    predict,
    relu,
    sgd_step,
    softmax,
)


def numeric_grads(params, x, y, eps=1e-5):
    """Central differences over every parameter, one entry at a time."""
    out = []
    for li, (w, b) in enumerate(params.layers):
        pair = []
        for which, t in ((0, w), (1, b)):
            g = np.zeros_like(t)
            for idx in np.ndindex(t.shape):
                vals = []
                for sgn in (1, -1):
                    layers = [(ww.copy(), bb.copy()) for ww, bb in params.layers]
                    layers[li][which][idx] += sgn * eps
                    loss, _ = loss_and_grads(ModelParams(params.arch, layers), (x, y))
                    vals.append(loss)
                g[idx] = (vals[0] - vals[1]) / (2 * eps)
            pair.append(g)
        out.append(tuple(pair))
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic.layers, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


class TestGradients:
    def test_mlp_matches_finite_differences(self, rng):
        arch = Arch.of([dense(4, 3), relu(), dense(3, 2)])
        params = build_model(arch, 3)
        x = rng.normal(size=(8, 4))
        y = one_hot(rng.integers(0, 2, 8), 2)
        _, g = loss_and_grads(params, (x, y))
        assert max_rel_err(g, numeric_grads(params, x, y)) < 1e-6

    @pytest.mark.parametrize("backend", kernels.BACKENDS)
    def test_convnet_matches_finite_differences(self, rng, backend):
        arch = Arch((1, 6, 6), (conv2d(1, 2, 3), relu(), maxpool2d(2), flatten(), dense(8, 3)))
        params = build_model(arch, 5)
        x = rng.normal(size=(8, 1, 6, 6))
        y = one_hot(rng.integers(0, 3, 8), 3)
        prev = kernels.BACKEND
        kernels.use_backend(backend)
        try:
            _, g = loss_and_grads(params, (x, y))
            num = numeric_grads(params, x, y)
        finally:
            kernels.use_backend(prev)
        assert max_rel_err(g, num) < 1e-6

    def test_strided_conv_matches_finite_differences(self, rng):
        arch = Arch((2, 7, 7), (conv2d(2, 2, 3, stride=2), relu(), flatten(), dense(18, 2)))
        params = build_model(arch, 11)
        x = rng.normal(size=(4, 2, 7, 7))
        y = one_hot(rng.integers(0, 2, 4), 2)
        _, g = loss_and_grads(params, (x, y))
        assert max_rel_err(g, numeric_grads(params, x, y)) < 1e-6


class TestForwardAndLoss:
    def test_zero_params_give_zero_logits(self, rng):
        arch = mlp((1, 4, 4), hidden=5, n_classes=3)
        z = build_model(arch, 0).zeros_like()
        np.testing.assert_array_equal(forward(z, rng.normal(size=(7, 1, 4, 4))), np.zeros((7, 3)))

    def test_identity_dense(self):
        p = ModelParams(Arch.of([dense(2, 2)]), [(np.eye(2), np.zeros(2))])
        np.testing.assert_array_equal(forward(p, np.array([[3.0, -1.0]])), [[3.0, -1.0]])

    def test_conv_window_sums(self):
        arch = Arch((1, 3, 3), (conv2d(1, 1, 2), flatten(), dense(4, 1)))
        p = build_model(arch, 0)
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        want = np.array([[x[0, 0, i:i + 2, j:j + 2].sum() for i in range(2) for j in range(2)]])
        for name in kernels.BACKENDS:
            kernels.use_backend(name)
            out = kernels.conv2d_forward(x, np.ones((1, 1, 2, 2)), np.zeros(1), 1)
            np.testing.assert_array_equal(out.reshape(1, 4), want)
        kernels.use_backend(kernels.BACKENDS[0])
        assert forward(p, x).shape == (1, 1)

    def test_uniform_logits_give_ln2(self):
        p = build_model(Arch.of([dense(3, 2)]), 0).zeros_like()
        loss, _ = loss_and_grads(p, (np.ones((4, 3)), one_hot([0, 1, 1, 0], 2)))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_known_softmax_loss(self):
        p = ModelParams(Arch.of([dense(1, 2)]), [(np.zeros((1, 2)), np.array([math.log(3), 0.0]))])
        loss, _ = loss_and_grads(p, (np.zeros((1, 1)), one_hot([0], 2)))
        assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
        assert loss == pytest.approx(0.287682, abs=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        z = rng.normal(scale=50, size=(20, 7))
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        p = ModelParams(Arch.of([dense(1, 2)]), [(np.zeros((1, 2)), np.array([0.0, 2000.0]))])
        loss, g = loss_and_grads(p, (np.zeros((1, 1)), one_hot([0], 2)))
        assert np.isfinite(loss) and loss > 600
        assert all(np.isfinite(t).all() for pair in g.layers for t in pair)

    def test_non_one_hot_row_is_named(self):
        p = build_model(Arch.of([dense(2, 3)]), 0)
        y = one_hot([0, 1], 3)
        y[1] = [0.5, 0.5, 0.0]
        with pytest.raises(InputError, match="row 1"):
            loss_and_grads(p, (np.zeros((2, 2)), y))

    def test_input_shape_mismatch(self):
        p = build_model(Arch.of([dense(2, 3)]), 0)
        with pytest.raises(InputError):
            forward(p, np.zeros((2, 5)))

    def test_predict_ties_go_to_lower_class(self):
        p = build_model(Arch.of([dense(2, 3)]), 0).zeros_like()
        np.testing.assert_array_equal(predict(p, np.ones((5, 2))), np.zeros(5))


class TestBuildModel:
    def test_shapes_and_zero_biases(self):
        p = build_model([dense(4, 2)], 7)
        assert [(w.shape, b.shape) for w, b in p.layers] == [((4, 2), (2,))]
        np.testing.assert_array_equal(p.layers[0][1], 0.0)

    def test_init_bounds(self):
        p = build_model([dense(30, 20)], 1)
        s = math.sqrt(6 / 50)
        assert np.abs(p.layers[0][0]).max() <= s

    def test_deterministic(self):
        a, b = build_model(convnet(), 3), build_model(convnet(), 3)
        assert a.bitwise_equal(b)
        assert not a.bitwise_equal(build_model(convnet(), 4))

    def test_shape_mismatch_names_layers(self):
        with pytest.raises(ConfigError, match="shape mismatch 2 vs 3"):
            build_model([dense(4, 2), dense(3, 2)], 0)

    def test_must_end_in_dense(self):
        with pytest.raises(ConfigError):
            Arch((1, 4, 4), (conv2d(1, 1, 2),))

    def test_mlp_sizes(self):
        assert mlp().layer_sizes() == [784 * 500 + 500, 500 * 10 + 10]


class TestSteps:
    def test_zero_step(self, rng):
        p = build_model(mlp((1, 3, 3), 4, 2), 0)
        g = ModelParams(p.arch, [(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in p.layers])
        new, delta = sgd_step(p, g, 0.0)
        assert new.bitwise_equal(p)
        assert all(not d.any() for pair in delta.layers for d in pair)

    def test_one_element(self):
        arch = Arch.of([dense(1, 1)])
        p = ModelParams(arch, [(np.array([[1.0]]), np.array([0.0]))])
        g = ModelParams(arch, [(np.array([[2.0]]), np.array([0.0]))])
        new, delta = sgd_step(p, g, 0.5)
        assert new.layers[0][0][0, 0] == 0.0
        assert delta.layers[0][0][0, 0] == -1.0

    def test_delta_replays_bitwise(self, rng):
        p = build_model(mlp((1, 3, 3), 4, 2), 0)
        g = ModelParams(p.arch, [(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in p.layers])
        new, delta = sgd_step(p, g, 0.0137)
        assert param_axpy(p, 1, delta).bitwise_equal(new)
        st = AdamState.for_params(p)
        new, delta = adam_step(p, g, st, 0.001)
        assert param_axpy(p, 1, delta).bitwise_equal(new)

    def test_negative_rate_rejected(self):
        p = build_model([dense(2, 2)], 0)
        with pytest.raises(UsageError):
            sgd_step(p, p, -1.0)

    def test_axpy(self):
        arch = Arch.of([dense(1, 2)])
        dst = ModelParams(arch, [(np.array([[2.0, 3.0]]), np.zeros(2))])
        src = ModelParams(arch, [(np.array([[1.0, -1.0]]), np.zeros(2))])
        np.testing.assert_array_equal(param_axpy(dst, -1, src).layers[0][0], [[1.0, 4.0]])
        assert param_axpy(dst, 1, dst.zeros_like()).bitwise_equal(dst)

    def test_axpy_inverse_pair_exact_values(self, rng):
        # dyadic values with few mantissa bits add and subtract without rounding
        arch = mlp((1, 3, 3), 4, 2)
        shapes = [(w.shape, b.shape) for w, b in build_model(arch, 0).layers]
        dst = ModelParams(arch, [(rng.integers(-64, 64, ws) / 8.0, rng.integers(-64, 64, bs) / 8.0) for ws, bs in shapes])
        src = ModelParams(arch, [(rng.integers(-64, 64, ws) / 16.0, rng.integers(-64, 64, bs) / 16.0) for ws, bs in shapes])
        assert param_axpy(param_axpy(dst, 1, src), -1, src).bitwise_equal(dst)

    def test_axpy_inverse_pair_rounding(self, rng):
        arch = mlp((1, 3, 3), 4, 2)
        dst = build_model(arch, 1)
        src = ModelParams(arch, [(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in dst.layers])
        back = param_axpy(param_axpy(dst, 1, src), -1, src)
        assert back.max_abs_diff(dst) <= 1e-15
        with pytest.raises(UsageError):
            param_axpy(dst, 2, src)

    def test_adam_moves_against_gradient(self):
        arch = Arch.of([dense(1, 1)])
        p = ModelParams(arch, [(np.array([[1.0]]), np.array([0.0]))])
        g = ModelParams(arch, [(np.array([[2.0]]), np.array([-3.0]))])
        new, _ = adam_step(p, g, AdamState.for_params(p), 0.1)
        # first bias-corrected Adam step has magnitude lr
        np.testing.assert_allclose(new.layers[0][0], [[0.9]], atol=1e-8)
        np.testing.assert_allclose(new.layers[0][1], [0.1], atol=1e-8)


class TestKernels:
    @pytest.mark.skipif(len(kernels.BACKENDS) < 2, reason="compiled extension not built")
    def test_backends_agree(self, rng):
        from forgetd import _kernels, _pykernels

        x = rng.normal(size=(3, 2, 9, 9))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        for s in (1, 2):
            np.testing.assert_allclose(_kernels.conv2d_forward(x, w, b, s), _pykernels.conv2d_forward(x, w, b, s), atol=1e-12)
            out = _pykernels.conv2d_forward(x, w, b, s)
            dout = rng.normal(size=out.shape)
            for a, c in zip(_kernels.conv2d_backward(x, w, dout, s), _pykernels.conv2d_backward(x, w, dout, s)):
                np.testing.assert_allclose(a, c, atol=1e-12)
        o1, a1 = _kernels.maxpool2d_forward(x, 2)
        o2, a2 = _pykernels.maxpool2d_forward(x, 2)
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(a1, a2)
        d = rng.normal(size=o1.shape)
        np.testing.assert_array_equal(
            _kernels.maxpool2d_backward(d, a1, x.shape, 2), _pykernels.maxpool2d_backward(d, a2, x.shape, 2)
        )

    def test_maxpool_ties_pick_first(self):
        x = np.ones((1, 1, 2, 2))
        for name in kernels.BACKENDS:
            kernels.use_backend(name)
            out, arg = kernels.maxpool2d_forward(x, 2)
            g = kernels.maxpool2d_backward(np.ones_like(out), arg, x.shape, 2)
            np.testing.assert_array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])
        kernels.use_backend(kernels.BACKENDS[0])

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.use_backend("gpu")
