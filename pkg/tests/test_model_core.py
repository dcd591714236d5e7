import numpy as np
import pytest

from mfdl.model_core import (
    ActivationSpec,
    BatchBackprop,
    NetworkSpec,
    NumericError,
    ParamLayout,
    ShapeError,
    forward,
    forward_batch,
    gaussian_nll,
    grad_logdensity,
    loss_and_grad,
    softmax_cross_entropy,
)

LINEAR = ActivationSpec("linear")
RELU = ActivationSpec("relu")
LEAKY = ActivationSpec("leaky_relu", 0.1)


def random_theta(spec, rng, scale=0.7):
    layout = ParamLayout(spec)
    return rng.normal(scale=scale, size=layout.n_params)


class TestSpecsAndLayout:
    def test_activation_validation(self):
        with pytest.raises(ValueError):
            ActivationSpec("sigmoid")
        with pytest.raises(ValueError):
            ActivationSpec("leaky_relu", 0.0)
        with pytest.raises(ValueError):
            ActivationSpec("leaky_relu", 1.5)
        assert ActivationSpec("leaky_relu", 1.0).negative_slope == 1.0

    def test_network_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec((3,), LINEAR)
        with pytest.raises(ValueError):
            NetworkSpec((3, 0, 2), LINEAR)

    def test_spec_json_round_trip(self):
        spec = NetworkSpec((2, 8, 8, 1), LEAKY, has_bias=True)
        obj = spec.to_json()
        assert obj == {
            "widths": [2, 8, 8, 1],
            "activation": "leaky_relu",
            "alpha": 0.1,
            "bias": True,
        }
        assert NetworkSpec.from_json(obj) == spec

    @pytest.mark.parametrize("has_bias", [True, False])
    @pytest.mark.parametrize("widths", [(2, 3), (4, 5, 2), (1, 1, 1, 1)])
    def test_pack_unpack_round_trip_exact(self, widths, has_bias):
        spec = NetworkSpec(widths, LEAKY, has_bias=has_bias)
        layout = ParamLayout(spec)
        expected = sum(
            wo * wi + (wo if has_bias else 0) for wo, wi in spec.weight_shapes()
        )
        assert layout.n_params == expected
        rng = np.random.default_rng(0)
        theta = rng.normal(size=layout.n_params)
        blocks = layout.unpack(theta)
        assert np.array_equal(layout.pack(blocks), theta)

    def test_unpack_rejects_wrong_length(self):
        layout = ParamLayout(NetworkSpec((2, 3), LINEAR))
        with pytest.raises(ShapeError):
            layout.unpack(np.zeros(layout.n_params + 1))


class TestForward:
    def test_identity_linear_net(self):
        spec = NetworkSpec((2, 2, 2), LINEAR, has_bias=False)
        layout = ParamLayout(spec)
        theta = layout.pack([(np.eye(2), None), (np.eye(2), None)])
        y, pattern = forward(spec, theta, np.array([1.0, 2.0]))
        assert np.array_equal(y, [1.0, 2.0])
        assert len(pattern) == 1
        assert np.array_equal(pattern[0], [1.0, 1.0])

    def test_relu_kills_negative_preactivation(self):
        spec = NetworkSpec((1, 1, 1), RELU, has_bias=False)
        layout = ParamLayout(spec)
        theta = layout.pack([(np.array([[1.0]]), None), (np.array([[1.0]]), None)])
        y, pattern = forward(spec, theta, np.array([-3.0]))
        assert y[0] == 0.0
        assert pattern[0][0] == 0.0

    def test_zero_preactivation_takes_negative_branch(self):
        spec = NetworkSpec((1, 1, 1), LEAKY, has_bias=False)
        layout = ParamLayout(spec)
        theta = layout.pack([(np.array([[1.0]]), None), (np.array([[1.0]]), None)])
        _, pattern = forward(spec, theta, np.array([0.0]))
        assert pattern[0][0] == 0.1

    def test_matches_independent_reimplementation(self):
        # Straightforward per-layer loop as a second opinion.
        rng = np.random.default_rng(42)
        spec = NetworkSpec((2, 8, 8, 1), LEAKY, has_bias=True)
        theta = random_theta(spec, rng)
        x = rng.normal(size=2)
        y, _ = forward(spec, theta, x)

        blocks = ParamLayout(spec).unpack(theta)
        h = x
        for l, (W, b) in enumerate(blocks):
            z = W @ h + b
            if l < spec.n_layers - 1:
                h = np.where(z > 0, z, 0.1 * z)
            else:
                h = z
        assert np.allclose(y, h, rtol=1e-12, atol=0)

    def test_frozen_pattern_map_is_linear_and_agrees_at_anchor(self):
        rng = np.random.default_rng(7)
        spec = NetworkSpec((3, 6, 6, 2), LEAKY, has_bias=True)
        theta = random_theta(spec, rng)
        x = rng.normal(size=3)
        y, pattern = forward(spec, theta, x)

        def frozen_eval(xp):
            blocks = ParamLayout(spec).unpack(theta)
            h = xp
            for l, (W, b) in enumerate(blocks):
                z = W @ h + b
                h = pattern[l] * z if l < spec.n_layers - 1 else z
            return h

        assert np.array_equal(frozen_eval(x), y)
        # Linearity: f(a u + b v) - f(0) == a (f(u) - f(0)) + b (f(v) - f(0))
        u, v = rng.normal(size=3), rng.normal(size=3)
        f0 = frozen_eval(np.zeros(3))
        lhs = frozen_eval(2.0 * u + 3.0 * v) - f0
        rhs = 2.0 * (frozen_eval(u) - f0) + 3.0 * (frozen_eval(v) - f0)
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-12)

    def test_dimension_mismatch(self):
        spec = NetworkSpec((2, 3), LINEAR)
        theta = ParamLayout(spec).zeros()
        with pytest.raises(ShapeError):
            forward(spec, theta, np.zeros(3))
        with pytest.raises(ShapeError):
            forward_batch(spec, theta, np.zeros((4, 3)))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        spec = NetworkSpec((2, 5, 3), LEAKY)
        theta = random_theta(spec, rng)
        X = rng.normal(size=(6, 2))
        Y, pats = forward_batch(spec, theta, X)
        for i in range(6):
            yi, pi = forward(spec, theta, X[i])
            # BLAS may order sums differently for different batch sizes.
            assert np.allclose(Y[i], yi, rtol=1e-13, atol=0)
            assert np.array_equal(pats[0][i], pi[0])


def fd_gradient(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(len(theta)):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric, rtol):
    scale = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)),
        1e-12 + 1e-9 * np.abs(analytic).max(),
    )
    assert np.max(np.abs(analytic - numeric) / scale) < rtol


class TestGradients:
    def test_hand_analytic_quadratic(self):
        # 1-1 linear net, w=2, x=1, target 0, L=(y-t)^2: dL/dw = 2*y*x = 4.
        spec = NetworkSpec((1, 1), LINEAR, has_bias=False)
        theta = np.array([2.0])

        def loss(out):
            return float((out**2).sum()), 2.0 * out

        g = grad_logdensity(spec, theta, np.array([[1.0]]), loss)
        assert np.allclose(g, [4.0], rtol=0, atol=1e-15)

    def test_constant_loss_gives_zero_gradient(self):
        spec = NetworkSpec((2, 4, 2), LEAKY)
        theta = random_theta(spec, np.random.default_rng(0))

        def loss(out):
            return 1.5, np.zeros_like(out)

        g = grad_logdensity(spec, theta, np.zeros((3, 2)), loss)
        assert np.array_equal(g, np.zeros_like(theta))

    @pytest.mark.parametrize(
        "widths,act,bias",
        [
            ((2, 7, 3), LEAKY, True),
            ((3, 5, 5, 2), RELU, True),
            ((2, 6, 1), LINEAR, False),
        ],
    )
    def test_matches_finite_differences(self, widths, act, bias):
        rng = np.random.default_rng(11)
        spec = NetworkSpec(widths, act, has_bias=bias)
        theta = random_theta(spec, rng)
        X = rng.normal(size=(12, widths[0]))
        labels = rng.integers(0, widths[-1], size=12)

        def loss(out):
            return softmax_cross_entropy(out, labels)

        def value_only(t):
            return loss_and_grad(spec, t, X, loss)[0]

        analytic = grad_logdensity(spec, theta, X, loss)
        numeric = fd_gradient(value_only, theta)
        assert_grad_close(analytic, numeric, 1e-5)

    def test_gaussian_nll_gradient(self):
        rng = np.random.default_rng(5)
        spec = NetworkSpec((1, 8, 1), LEAKY)
        theta = random_theta(spec, rng)
        X = rng.normal(size=(10, 1))
        t = rng.normal(size=(10, 1))

        def loss(out):
            return gaussian_nll(out, t, 0.3)

        analytic = grad_logdensity(spec, theta, X, loss)
        numeric = fd_gradient(lambda th: loss_and_grad(spec, th, X, loss)[0], theta)
        assert_grad_close(analytic, numeric, 1e-5)

    def test_non_finite_loss_raises(self):
        spec = NetworkSpec((1, 1), LINEAR, has_bias=False)

        def loss(out):
            return float("nan"), out

        with pytest.raises(NumericError):
            loss_and_grad(spec, np.array([1.0]), np.array([[1.0]]), loss)

    def test_non_finite_gradient_reports_index(self):
        spec = NetworkSpec((1, 2), LINEAR, has_bias=False)

        def loss(out):
            g = np.zeros_like(out)
            g[0, 1] = np.inf
            return 0.0, g

        with pytest.raises(NumericError) as err:
            loss_and_grad(spec, np.zeros(2), np.array([[1.0]]), loss)
        assert err.value.param_index == 1

    def test_engine_reuse_matches_one_shot(self):
        rng = np.random.default_rng(9)
        spec = NetworkSpec((2, 5, 2), LEAKY)
        X = rng.normal(size=(8, 2))
        labels = rng.integers(0, 2, size=8)

        def loss(out):
            return softmax_cross_entropy(out, labels)

        engine = BatchBackprop(spec, 8)
        for _ in range(3):
            theta = random_theta(spec, rng)
            v1, g1 = engine.loss_and_grad(theta, X, loss)
            v2, g2 = loss_and_grad(spec, theta, X, loss)
            assert v1 == v2
            assert np.array_equal(g1, g2)
            out = engine.outputs(theta, X)
            ref, _ = forward_batch(spec, theta, X)
            assert np.allclose(out, ref, rtol=1e-15, atol=0)
