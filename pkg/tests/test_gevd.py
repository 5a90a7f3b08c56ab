"""Tests for the extreme-value precision cap."""

import math

import numpy as np
import pytest

from bcla import (
    GevdParams,
    InputError,
    PrecisionCap,
    fit_gevd,
    gevd_cdf,
    gevd_logpdf,
    gevd_quantile,
    precision_upper_bound,
    sample_block_maxima,
    sample_gevd,
)


class TestParams:
    def test_scale_must_be_positive(self):
        with pytest.raises(InputError):
            GevdParams(k=0.1, vartheta=0.0, mu=1.0)

    def test_params_must_be_finite(self):
        with pytest.raises(InputError):
            GevdParams(k=np.nan, vartheta=1.0, mu=0.0)

    def test_cap_must_be_positive(self):
        with pytest.raises(InputError):
            PrecisionCap.fixed(0.0)


class TestQuantile:
    def test_gumbel_anchor(self):
        # k=0, scale 1, location 0 at p = e^-1: -ln(-ln e^-1) = 0
        q = gevd_quantile(GevdParams(0.0, 1.0, 0.0), math.exp(-1))
        assert q == pytest.approx(0.0, abs=1e-12)

    def test_direct_substitution(self):
        # k=1, scale 1, location 0, p=0.99: 1/(-ln 0.99) - 1
        q = gevd_quantile(GevdParams(1.0, 1.0, 0.0), 0.99)
        assert q == pytest.approx(98.49916247342207, abs=1e-9)

    def test_strictly_increasing_in_p(self):
        for params in (GevdParams(0.2, 0.01, 0.05), GevdParams(-0.15, 2.0, 1.0), GevdParams(0.0, 1.0, 0.0)):
            ps = np.linspace(0.01, 0.99, 25)
            qs = [gevd_quantile(params, p) for p in ps]
            assert np.all(np.diff(qs) > 0)

    def test_median_quantile_inside_sample_range(self):
        maxima = sample_block_maxima(4.0, 0.003, 20, 10_000, seed=8)
        params = fit_gevd(maxima)
        q50 = gevd_quantile(params, 0.5)
        assert maxima.min() < q50 < maxima.max()

    def test_p_bounds(self):
        with pytest.raises(InputError):
            gevd_quantile(GevdParams(0.1, 1.0, 0.0), 1.0)

    def test_quantile_inverts_cdf(self):
        params = GevdParams(0.12, 0.004, 0.02)
        for p in (0.1, 0.5, 0.9, 0.99):
            assert gevd_cdf(gevd_quantile(params, p), params) == pytest.approx(p, abs=1e-9)


class TestDensity:
    def test_gumbel_branch_is_the_analytic_limit(self):
        # pdf(x) = exp(-(x-mu)/s - e^{-(x-mu)/s}) / s at k = 0
        params = GevdParams(0.0, 2.0, 1.0)
        x = np.array([-3.0, 0.0, 1.0, 4.0])
        s = (x - 1.0) / 2.0
        expected = -math.log(2.0) - s - np.exp(-s)
        assert np.allclose(gevd_logpdf(x, params), expected)
        # tiny-but-nonzero shape agrees with the limit
        near = GevdParams(1e-9, 2.0, 1.0)
        assert np.allclose(gevd_logpdf(x, near), expected)

    def test_off_support_is_minus_inf(self):
        params = GevdParams(0.5, 1.0, 0.0)  # support x > -2
        assert gevd_logpdf(np.array([-3.0]), params)[0] == -np.inf


class TestBlockMaxima:
    def test_block_one_is_plain_gamma(self):
        m = sample_block_maxima(4.0, 0.003, block_size=1, n_blocks=100_000, seed=5)
        assert m.mean() == pytest.approx(4.0 * 0.003, rel=0.02)

    def test_monte_carlo_block(self):
        m = sample_block_maxima(4.0, 0.003, block_size=69, n_blocks=10_000, seed=1)
        assert np.all(m > 0)
        assert m.mean() > 4.0 * 0.003  # maxima exceed the plain mean

    def test_determinism(self):
        a = sample_block_maxima(4.0, 0.003, 10, 500, seed=77)
        b = sample_block_maxima(4.0, 0.003, 10, 500, seed=77)
        assert np.array_equal(a, b)

    def test_invalid_params(self):
        with pytest.raises(InputError):
            sample_block_maxima(-1.0, 0.003, 1, 1000, seed=0)
        with pytest.raises(InputError):
            sample_block_maxima(4.0, 0.003, 0, 1000, seed=0)
        with pytest.raises(InputError):
            sample_block_maxima(4.0, 0.003, 1, 10, seed=0)


class TestFit:
    def test_self_consistency_on_known_params(self):
        true = GevdParams(k=0.1, vartheta=0.005, mu=0.03)
        x = sample_gevd(true, 100_000, seed=123)
        fit = fit_gevd(x)
        assert fit.k == pytest.approx(true.k, rel=0.05)
        assert fit.vartheta == pytest.approx(true.vartheta, rel=0.05)
        assert fit.mu == pytest.approx(true.mu, rel=0.05)

    def test_degenerate_sample_is_error(self):
        with pytest.raises(InputError, match="degenerate"):
            fit_gevd(np.full(200, 0.5))

    def test_too_few_samples(self):
        with pytest.raises(InputError, match="100"):
            fit_gevd(np.linspace(0.1, 0.2, 50))

    def test_support_constraint_holds_on_fit(self):
        maxima = sample_block_maxima(4.0, 0.0003, 20, 5_000, seed=3)
        params = fit_gevd(maxima)
        assert np.all(np.isfinite(gevd_logpdf(maxima, params)))

    def test_cdf_at_empirical_99th_percentile(self):
        maxima = sample_block_maxima(4.0, 0.003, 69, 10_000, seed=2024)
        params = fit_gevd(maxima)
        c = gevd_cdf(np.quantile(maxima, 0.99), params)
        assert 0.97 <= float(c) <= 0.995


class TestPrecisionUpperBound:
    def test_bound_matches_empirical_percentile(self):
        cap = precision_upper_bound(4.0, 0.003, block_size=69, seed=2024)
        maxima = sample_block_maxima(4.0, 0.003, 69, 10_000, seed=2024)
        emp = float(np.quantile(maxima, 0.99))
        assert cap.lambda_max == pytest.approx(emp, rel=0.10)

    def test_bound_in_expected_band(self):
        cap = precision_upper_bound(4.0, 0.003, block_size=69, seed=2024)
        assert 0.03 <= cap.lambda_max <= 0.05

    def test_scale_family(self):
        c1 = precision_upper_bound(4.0, 0.003, block_size=69, seed=11)
        c2 = precision_upper_bound(4.0, 0.006, block_size=69, seed=11)
        assert c2.lambda_max / c1.lambda_max == pytest.approx(2.0, rel=0.10)

    def test_monotone_in_block_size(self):
        c1 = precision_upper_bound(4.0, 0.003, block_size=1, seed=7)
        c100 = precision_upper_bound(4.0, 0.003, block_size=100, seed=7)
        assert c1.lambda_max <= c100.lambda_max

    def test_records_provenance(self):
        cap = precision_upper_bound(4.0, 0.003, block_size=12, seed=1, n_blocks=2_000)
        assert cap.block_size == 12 and cap.n_blocks == 2_000
        assert cap.params is not None
