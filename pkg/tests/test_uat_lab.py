import numpy as np
import pytest
from scipy.special import ndtr

from mfdl.model_core import ActivationSpec
from mfdl.posterior_geometry import gmm_bic_select
from mfdl.uat_lab import (
    IntroducerLayer,
    MapperFit,
    QuantileMap,
    TargetPredictive,
    assemble_posterior,
    bimodal_demo_target,
    build_rv_introducer,
    fit_rv_mapper,
    induced_vs_target_ks,
    ks_statistic,
    quantile_map,
)

LEAKY = ActivationSpec("leaky_relu", 0.1)


class TestTargetPredictive:
    def test_validation(self):
        with pytest.raises(ValueError):
            TargetPredictive([0.5, 0.6], [0.0, 1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            TargetPredictive([1.0], [0.0], [0.0])

    def test_cdf_pdf_consistency(self):
        target = bimodal_demo_target()
        y = np.linspace(-5, 5, 2001)
        f = target.pdf(y)
        approx_cdf = np.cumsum(f) * (y[1] - y[0])
        assert np.max(np.abs(approx_cdf - target.cdf(y))) < 5e-3

    def test_quantile_inverts_cdf(self):
        target = bimodal_demo_target()
        for u in (0.01, 0.1, 0.5, 0.73, 0.99):
            y = target.quantile(u)
            assert abs(target.cdf(y) - u) < 1e-12

    def test_bimodal_quantiles_match_sampling_oracle(self):
        target = bimodal_demo_target()
        rng = np.random.default_rng(0)
        n = 2 * 10**6
        draws = target.sample(n, rng)
        for u in np.arange(0.1, 0.95, 0.1):
            emp = np.quantile(draws, u)
            exact = target.quantile(u)
            se = np.sqrt(u * (1 - u) / n) / max(target.pdf(exact), 1e-12)
            assert abs(emp - exact) < 3 * se + 1e-9


class TestQuantileMap:
    def test_standard_normal_is_identity_in_z(self):
        qm = quantile_map(TargetPredictive([1.0], [0.0], [1.0]), LEAKY)
        z = np.linspace(-4, 4, 41)
        h = np.where(z > 0, z, 0.1 * z)
        assert np.max(np.abs(qm(h) - z)) < 1e-9

    def test_affine_target(self):
        m, s = -0.7, 1.9
        qm = quantile_map(TargetPredictive([1.0], [m], [s]), LEAKY)
        z = np.linspace(-4, 4, 41)
        h = np.where(z > 0, z, 0.1 * z)
        assert np.max(np.abs(qm(h) - (m + s * z))) < 1e-8

    def test_monotone_in_z(self):
        qm = quantile_map(bimodal_demo_target(), LEAKY)
        z = np.linspace(-5, 5, 301)
        vals = qm.from_z(z)
        assert np.all(np.diff(vals) >= 0)

    def test_universality_of_the_uniform(self):
        target = bimodal_demo_target()
        qm = quantile_map(target, LEAKY)
        z = np.linspace(-4, 4, 81)
        u = ndtr(z)
        assert np.max(np.abs(target.cdf(qm.from_z(z)) - u)) < 1e-9

    def test_requires_invertible_activation(self):
        with pytest.raises(ValueError):
            QuantileMap(bimodal_demo_target(), ActivationSpec("relu"))


class TestIntroducer:
    def test_structure(self):
        intro = build_rv_introducer(3, sigma=0.01)
        assert np.array_equal(intro.weights.mu[0], np.zeros(3))
        assert np.array_equal(intro.weights.mu[1:], np.eye(3))
        assert intro.bias_sigma[0] == 1.0
        assert np.all(intro.bias_sigma[1:] == 0.01)

    def test_near_deterministic_copy(self):
        intro = build_rv_introducer(1, sigma=1e-12)
        rng = np.random.default_rng(1)
        x = np.array([0.5])
        w = intro.weights.mu + intro.weights.sigma * rng.standard_normal((2, 1))
        b = intro.bias_mu + intro.bias_sigma * rng.standard_normal(2)
        pre = w @ x + b
        assert abs(pre[1] - 0.5) < 1e-10  # x' tracks x

    def test_latent_preactivation_is_unit_gaussian(self):
        intro = build_rv_introducer(1, sigma=1e-3)
        rng = np.random.default_rng(2)
        n = 10**5
        x = np.array([1.0])
        w = intro.weights.mu + intro.weights.sigma * rng.standard_normal((n, 2, 1))
        b = intro.bias_mu + intro.bias_sigma * rng.standard_normal((n, 2))
        pre = (w @ x) + b
        from scipy import stats

        d = stats.kstest(pre[:, 0], stats.norm.cdf).statistic
        assert d < 0.01

    def test_copy_unit_variance(self):
        # At |x| = 1 the copied feature has variance 2 sigma^2.
        sigma = 0.05
        intro = build_rv_introducer(1, sigma=sigma)
        rng = np.random.default_rng(3)
        n = 10**5
        x = np.array([1.0])
        w = intro.weights.mu + intro.weights.sigma * rng.standard_normal((n, 2, 1))
        b = intro.bias_mu + intro.bias_sigma * rng.standard_normal((n, 2))
        xp = (w @ x)[:, 1] + b[:, 1]
        var = xp.var(ddof=1)
        se = 2 * sigma**2 * np.sqrt(2.0 / (n - 1))
        assert abs(var - 2 * sigma**2) < 5 * se

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            build_rv_introducer(1, sigma=0.0)


class TestMapper:
    def test_affine_target_small_width(self):
        qm = quantile_map(TargetPredictive([1.0], [1.5], [0.7]), LEAKY)
        fit = fit_rv_mapper(qm, width=8)
        assert fit.rmse < 1e-3
        assert not fit.under_capacity

    def test_under_capacity_flagged_not_raised(self):
        qm = quantile_map(bimodal_demo_target(), LEAKY)
        fit = fit_rv_mapper(qm, width=3)
        assert fit.under_capacity
        assert fit.rmse > 0.05

    def test_bimodal_width_256_end_to_end(self):
        target = bimodal_demo_target()
        mapper = fit_rv_mapper(quantile_map(target), width=256)
        intro = build_rv_introducer(1, sigma=1e-3)
        spec, q = assemble_posterior(intro, mapper, weight_std=1e-3)
        ks = induced_vs_target_ks(spec, q, target, [1.0], 10**4, seed=5)
        assert ks < 0.05

    def test_ks_decreases_with_weight_std(self):
        target = bimodal_demo_target()
        mapper = fit_rv_mapper(quantile_map(target), width=256)
        intro = build_rv_introducer(1, sigma=1e-3)
        ks = []
        for std in (1e-2, 1e-3, 1e-4):
            spec, q = assemble_posterior(intro, mapper, weight_std=std)
            ks.append(induced_vs_target_ks(spec, q, target, [1.0], 10**4, seed=5))
        assert ks[0] > ks[1] > ks[2]

    def test_induced_density_is_multimodal(self):
        target = bimodal_demo_target()
        mapper = fit_rv_mapper(quantile_map(target), width=256)
        intro = build_rv_introducer(1, sigma=1e-3)
        spec, q = assemble_posterior(intro, mapper, weight_std=1e-3)
        from mfdl.mfvi import predict

        out = predict(q, spec, np.array([1.0]), 10**4, seed=5)[:, 0]
        _, k, _ = gmm_bic_select(out, k_max=4, seed=0)
        assert k >= 2


class TestKSStatistic:
    def test_null_calibration(self):
        target = bimodal_demo_target()
        rng = np.random.default_rng(4)
        n = 10**4
        draws = target.sample(n, rng)
        assert ks_statistic(draws, target.cdf) < 1.63 / np.sqrt(n)

    def test_constant_sample_degenerate_case(self):
        target = bimodal_demo_target()
        c = 0.3
        samples = np.full(500, c)
        expected = max(target.cdf(c), 1.0 - target.cdf(c))
        assert abs(ks_statistic(samples, target.cdf) - expected) < 1e-2

    def test_needs_minimum_samples(self):
        target = bimodal_demo_target()
        mapper = fit_rv_mapper(quantile_map(target), width=4)
        intro = build_rv_introducer(1, sigma=1e-3)
        spec, q = assemble_posterior(intro, mapper, weight_std=1e-3)
        with pytest.raises(ValueError):
            induced_vs_target_ks(spec, q, target, [1.0], 50, seed=0)
