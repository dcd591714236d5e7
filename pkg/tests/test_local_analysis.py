import numpy as np
import pytest

from mfdl.data_io import two_moons
from mfdl.linear_analysis import MeanFieldLayer, cov_product, product_mean
from mfdl.local_analysis import (
    ActivationStats,
    activation_stats,
    anchor_exactness_ulp,
    augment_input,
    empirical_cov,
    local_product_matrix,
    max_ulp_gap,
    region_count_bound,
    sample_local_products,
)
from mfdl.mfvi import MeanFieldPosterior, PriorSpec, TrainConfig, train
from mfdl.model_core import ActivationSpec, NetworkSpec, ParamLayout, forward

LINEAR = ActivationSpec("linear")
RELU = ActivationSpec("relu")
LEAKY = ActivationSpec("leaky_relu", 0.1)


def he_theta(spec, rng, bias_scale=0.1):
    layout = ParamLayout(spec)
    blocks = []
    for n_out, n_in in spec.weight_shapes():
        W = rng.normal(scale=np.sqrt(2.0 / n_in), size=(n_out, n_in))
        b = rng.normal(scale=bias_scale, size=n_out) if spec.has_bias else None
        blocks.append((W, b))
    return layout.pack(blocks)


class TestLocalProductMatrix:
    def test_linear_activation_is_plain_weight_product(self):
        rng = np.random.default_rng(0)
        spec = NetworkSpec((3, 4, 2), LINEAR, has_bias=False)
        theta = rng.normal(size=ParamLayout(spec).n_params)
        (W1, _), (W2, _) = ParamLayout(spec).unpack(theta)
        for x in (rng.normal(size=3), rng.normal(size=3)):
            s = local_product_matrix(spec, theta, x)
            assert np.allclose(s.P, W2 @ W1, rtol=1e-15, atol=1e-15)

    def test_all_on_relu_equals_plain_product(self):
        rng = np.random.default_rng(1)
        spec = NetworkSpec((2, 3, 2), RELU, has_bias=False)
        layout = ParamLayout(spec)
        W1 = rng.uniform(0.1, 1.0, size=(3, 2))
        W2 = rng.uniform(0.1, 1.0, size=(2, 3))
        theta = layout.pack([(W1, None), (W2, None)])
        x = np.array([0.5, 1.5])  # positive weights + positive input: all on
        s = local_product_matrix(spec, theta, x)
        assert np.allclose(s.P, W2 @ W1, rtol=1e-15, atol=1e-15)
        assert all(np.all(p == 1.0) for p in s.pattern)

    def test_bias_folding_shape_and_anchor_value(self):
        rng = np.random.default_rng(2)
        spec = NetworkSpec((2, 5, 3), LEAKY, has_bias=True)
        theta = he_theta(spec, rng)
        x = rng.normal(size=2)
        s = local_product_matrix(spec, theta, x)
        assert s.P.shape == (3, 3)  # (n_out, n_in + 1)
        y, _ = forward(spec, theta, x)
        assert max_ulp_gap(s.P @ augment_input(spec, x), y) < 16

    def test_exactness_battery(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(300):
            depth = int(rng.integers(2, 5))
            widths = tuple(int(rng.integers(2, 9)) for _ in range(depth + 1))
            spec = NetworkSpec(widths, LEAKY, has_bias=bool(rng.integers(0, 2)))
            theta = he_theta(spec, rng)
            x = rng.normal(size=widths[0])
            s = local_product_matrix(spec, theta, x)
            worst = max(worst, anchor_exactness_ulp(spec, theta, x, s.P))
        assert worst <= 4.0

    def test_pattern_stability_in_small_ball(self):
        rng = np.random.default_rng(4)
        spec = NetworkSpec((2, 6, 6, 2), LEAKY)
        theta = he_theta(spec, rng)
        x = rng.normal(size=2)
        s = local_product_matrix(spec, theta, x)
        checked = 0
        for _ in range(50):
            xp = x + rng.normal(scale=1e-7, size=2)
            _, pattern = forward(spec, theta, xp)
            if all(np.array_equal(a, b) for a, b in zip(pattern, s.pattern)):
                assert anchor_exactness_ulp(spec, theta, xp, s.P) <= 4.0
                checked += 1
        assert checked > 0


class TestSampleLocalProducts:
    def test_tiny_std_gives_identical_samples(self):
        rng = np.random.default_rng(5)
        spec = NetworkSpec((2, 4, 2), LEAKY)
        mu = he_theta(spec, rng)
        q = MeanFieldPosterior.from_moments(spec, mu, 1e-12)
        P = sample_local_products(spec, q, np.array([0.3, -0.1]), 40, seed=0)
        assert np.max(P.std(axis=0)) < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        spec = NetworkSpec((2, 4, 2), LEAKY)
        q = MeanFieldPosterior.from_moments(spec, he_theta(spec, rng), 0.05)
        x = np.array([0.4, 0.2])
        a = sample_local_products(spec, q, x, 500, seed=3)
        b = sample_local_products(spec, q, x, 500, seed=3)
        assert np.array_equal(a, b)

    def test_matches_per_sample_op(self):
        rng = np.random.default_rng(7)
        spec = NetworkSpec((2, 4, 3), LEAKY)
        q = MeanFieldPosterior.from_moments(spec, he_theta(spec, rng), 0.05)
        x = np.array([0.8, -0.5])
        P = sample_local_products(spec, q, x, 8, seed=9)
        from mfdl._rng import derived_rng

        thetas = q.mu + q.std() * derived_rng(9, 0).standard_normal((8, q.n_params))
        for i in range(8):
            ref = local_product_matrix(spec, thetas[i], x)
            assert max_ulp_gap(P[i], ref.P) < 64

    def test_linear_activation_covariance_matches_analytic(self):
        rng = np.random.default_rng(8)
        spec = NetworkSpec((2, 3, 2), LINEAR, has_bias=False)
        mu = rng.normal(scale=0.6, size=ParamLayout(spec).n_params)
        q = MeanFieldPosterior.from_moments(spec, mu, 0.3)
        x = np.array([0.7, -0.4])
        n = 10**5
        P = sample_local_products(spec, q, x, n, seed=4)
        report = empirical_cov(P, anchor=x)
        analytic = cov_product(q.weight_layers())
        flat = P.reshape(n, -1)
        d = flat - flat.mean(axis=0)
        m22 = (d * d).T @ (d * d) / n
        cov_flat = report.cov.flat_matrix()
        se = np.sqrt(np.maximum(m22 - cov_flat**2, 0.0) / n)
        gap = np.abs(cov_flat - analytic.cov.flat_matrix())
        assert np.all(gap <= 5 * se + 1e-12)
        assert np.allclose(report.mean, product_mean(q.weight_layers()), atol=5e-3)

    def test_trained_leaky_model_has_off_diagonal_structure(self):
        data = two_moons(300, seed=1)
        spec = NetworkSpec((2, 16, 16, 2), LEAKY)
        cfg = TrainConfig(epochs=150, batch_size=64, n_train_samples=2, seed=3)
        q = train(spec, data, PriorSpec(1.0), cfg)
        P = sample_local_products(spec, q, data.X[20], 10**4, seed=7)
        report = empirical_cov(P, anchor=data.X[20])
        flat = report.cov.flat_matrix()
        off = flat.copy()
        np.fill_diagonal(off, 0.0)
        assert np.abs(off).max() > 1e-8  # single-layer baseline is exactly 0


class TestEmpiricalCov:
    def test_identical_samples_zero_covariance(self):
        P = np.tile(np.arange(6.0).reshape(1, 2, 3), (10, 1, 1))
        report = empirical_cov(P)
        assert np.all(report.cov.data == 0.0)

    def test_recovers_known_gaussian(self):
        rng = np.random.default_rng(9)
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.5 * np.eye(4)
        L = np.linalg.cholesky(cov)
        n = 10**5
        flat = rng.standard_normal((n, 4)) @ L.T
        report = empirical_cov(flat.reshape(n, 2, 2))
        d = flat - flat.mean(axis=0)
        m22 = (d * d).T @ (d * d) / n
        se = np.sqrt(np.maximum(m22 - report.cov.flat_matrix() ** 2, 0.0) / n)
        assert np.all(np.abs(report.cov.flat_matrix() - cov) <= 5 * se + 1e-12)

    def test_two_pass_matches_one_pass_oracle(self):
        rng = np.random.default_rng(10)
        P = rng.normal(size=(500, 2, 2))
        report = empirical_cov(P)
        flat = P.reshape(500, -1)
        n = 500
        one_pass = (flat.T @ flat / n - np.outer(flat.mean(0), flat.mean(0))) * (
            n / (n - 1)
        )
        assert np.allclose(report.cov.flat_matrix(), one_pass, rtol=1e-10, atol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            empirical_cov(np.zeros((1, 2, 2)))

    def test_accepts_sample_objects(self):
        rng = np.random.default_rng(11)
        spec = NetworkSpec((2, 3, 2), LEAKY)
        theta = he_theta(spec, rng)
        x = rng.normal(size=2)
        samples = [local_product_matrix(spec, theta, x) for _ in range(3)]
        report = empirical_cov(samples)
        assert report.n_samples == 3


class TestActivationStats:
    def test_linear_all_on(self):
        rng = np.random.default_rng(12)
        spec = NetworkSpec((2, 4, 2), LINEAR)
        q = MeanFieldPosterior.from_moments(spec, he_theta(spec, rng), 0.1)
        stats = activation_stats(spec, q, two_moons(20, seed=0), 5, seed=1)
        assert stats.mean_on_fraction == 1.0
        assert stats.all_off_rows == 0

    def test_forced_all_off(self):
        spec = NetworkSpec((2, 3, 2), RELU, has_bias=False)
        layout = ParamLayout(spec)
        theta = layout.pack(
            [(-np.ones((3, 2)), None), (np.ones((2, 3)), None)]
        )
        q = MeanFieldPosterior.from_moments(spec, theta, 1e-8)
        X = np.abs(np.random.default_rng(1).normal(size=(10, 2))) + 0.1
        from mfdl.data_io import Dataset

        ds = Dataset(X, np.zeros(10, dtype=int), "classification")
        stats = activation_stats(spec, q, ds, 7, seed=2)
        assert stats.mean_on_fraction == 0.0
        assert stats.all_off_rows == 7 * 10

    def test_trained_relu_rarely_all_off(self):
        data = two_moons(200, seed=2)
        spec = NetworkSpec((2, 16, 16, 2), RELU)
        cfg = TrainConfig(epochs=100, batch_size=64, n_train_samples=2, seed=5)
        q = train(spec, data, PriorSpec(1.0), cfg)
        stats = activation_stats(spec, q, data, 50, seed=3)
        events = stats.n_theta * stats.n_inputs * 2  # two hidden layers
        assert stats.all_off_rows < 0.05 * events
        assert 0.1 < stats.mean_on_fraction < 0.95


class TestRegionBound:
    def test_three_hyperplanes_in_plane(self):
        # One hidden layer of 3 with 2-D input: classical count for 3 lines.
        spec = NetworkSpec((2, 3, 1), RELU)
        assert region_count_bound(spec) == 7

    def test_width_one_chain(self):
        spec = NetworkSpec((1, 1, 1, 1), RELU)
        assert region_count_bound(spec) == 2

    def test_no_hidden_layer(self):
        assert region_count_bound(NetworkSpec((3, 2), LINEAR)) == 1

    def test_always_at_least_one_and_exact_int(self):
        spec = NetworkSpec((2, 64, 64, 64, 64, 10), RELU)
        bound = region_count_bound(spec)
        assert isinstance(bound, int)
        assert bound == (32**2) ** 3 * (1 + 64 + 64 * 63 // 2)


class TestMultimodality:
    def test_trained_three_layer_leaky_model_flags_entries(self):
        data = two_moons(500, seed=0)
        spec = NetworkSpec((2, 16, 16, 2), LEAKY)
        cfg = TrainConfig(
            learning_rate=1e-3, batch_size=64, epochs=300, n_train_samples=4, seed=3
        )
        q = train(spec, data, PriorSpec(1.0), cfg)
        # anchor with the most variable local product across draws
        best_i, best_v = 0, -1.0
        for i in range(0, 60):
            P = sample_local_products(spec, q, data.X[i], 64, seed=100 + i)
            v = float(P.var(axis=0).max())
            if v > best_v:
                best_i, best_v = i, v
        x = data.X[best_i]
        P = sample_local_products(spec, q, x, 10**4, seed=7)
        report = empirical_cov(P, anchor=x, flag_entries=20, seed=11)
        assert len(report.multimodal_entries) >= 1
