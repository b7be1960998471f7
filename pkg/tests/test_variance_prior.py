import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from lnmix.patterns import ConditionDesign
from lnmix.variance_prior import (
    SampleVariances,
    VariancePrior,
    estimate_prior,
    quantile_grid,
    sample_variances,
    scaled_inv_chi2_cdf,
    shrink,
    trigamma_inverse,
)


def draw_sample_variances(rng, nu, phi, d, J):
    sigma2 = nu * phi / rng.chisquare(nu, size=J)
    return SampleVariances(sigma2 * rng.chisquare(d, size=J) / d, d)


def bisect_quantile(nu, phi, p):
    """sigma^2 with P(X <= sigma^2) = p, X ~ scaled inv-chi2, by bisection on gammaincc."""
    lo, hi = 1e-300, 1e300
    for _ in range(5000):
        mid = math.sqrt(lo * hi)
        if special.gammaincc(nu / 2, nu * phi / (2 * mid)) < p:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < 1e-14:
            break
    return math.sqrt(lo * hi)


class TestEstimatePrior:
    def test_recovers_dc3000_prior(self):
        rng = np.random.default_rng(3546)
        prior = estimate_prior(draw_sample_variances(rng, 3.546, 0.00509, 5, 50000))
        assert prior.nu == pytest.approx(3.546, rel=0.05)
        assert prior.phi == pytest.approx(0.00509, rel=0.02)

    def test_equal_variances_give_common_variance(self):
        prior = estimate_prior(SampleVariances(np.full(40, 0.02), 5))
        assert prior.common_variance
        # exp of the bias-corrected mean log variance: E log S^2 = log phi + digamma(d/2) - log(d/2)
        expect = 0.02 * 2.5 / math.exp(special.digamma(2.5))
        assert prior.phi == pytest.approx(expect, rel=1e-12)

    def test_too_few_genes(self):
        with pytest.raises(ValueError, match="at least 10"):
            estimate_prior(SampleVariances(np.array([0.1, 0.2]), 3))

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            estimate_prior(SampleVariances(np.zeros(20), 3))

    def test_zero_variances_floored_with_warning(self, rng):
        sv = draw_sample_variances(rng, 5.0, 0.01, 4, 500)
        s2 = sv.s2.copy()
        s2[:3] = 0.0
        with pytest.warns(RuntimeWarning, match="zero sample variance"):
            prior = estimate_prior(SampleVariances(s2, 4))
        assert math.isfinite(prior.phi)

    @pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
    def test_scale_equivariance(self, c):
        sv = draw_sample_variances(np.random.default_rng(1), 6.0, 0.02, 4, 3000)
        a = estimate_prior(sv)
        b = estimate_prior(SampleVariances(sv.s2 * c, sv.df))
        assert b.nu == pytest.approx(a.nu, rel=1e-6)
        assert b.phi == pytest.approx(a.phi * c, rel=1e-6)

    def test_trigamma_inverse(self):
        for y in (0.01, 0.7, 3.0, 250.0):
            assert trigamma_inverse(float(special.polygamma(1, y))) == pytest.approx(y, rel=1e-10)

    def test_sample_variances_pooled(self):
        design = ConditionDesign(("a", "a", "b", "b", "b"))
        y = np.array([[1.0, 3.0, 0.0, 1.0, 2.0]])
        sv = sample_variances(y, design)
        assert sv.df == 3
        np.testing.assert_allclose(sv.s2, [(2.0 + 2.0) / 3])

    def test_sample_variances_need_df(self):
        with pytest.raises(ValueError, match="degree of freedom"):
            sample_variances(np.zeros((3, 2)), ConditionDesign(("a", "b")))


class TestShrink:
    sv = SampleVariances(np.array([0.01]), 5)
    prior = VariancePrior(3.546, 0.00509)

    def test_hand_evaluated(self):
        num = 3.546 * 0.00509 + 5 * 0.01
        assert shrink(self.sv, self.prior, "ebarrays", 10, 5)[0] == pytest.approx(num / 11.546, rel=1e-14)
        assert shrink(self.sv, self.prior, "posterior-expectation", 10, 5)[0] == pytest.approx(num / 6.546, rel=1e-14)

    @pytest.mark.parametrize("rule", ["ebarrays", "posterior-expectation"])
    def test_dominant_prior(self, rule):
        phi = 0.004
        val = shrink(SampleVariances(np.array([phi]), 5), VariancePrior(1e12, phi), rule, 10, 5)[0]
        assert val == pytest.approx(phi, rel=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(
        s2=st.lists(st.floats(0, 1e3, allow_subnormal=False), min_size=1, max_size=20),
        nu=st.floats(0.5, 1e4),
        phi=st.floats(1e-6, 1e2),
        T=st.integers(1, 8),
        extra=st.integers(1, 8),
    )
    def test_ebarrays_never_exceeds_posterior_expectation(self, s2, nu, phi, T, extra):
        I = T + extra
        if nu + extra - 2 <= 0:
            return
        sv = SampleVariances(np.array(s2), extra)
        a = shrink(sv, VariancePrior(nu, phi), "ebarrays", I, T)
        b = shrink(sv, VariancePrior(nu, phi), "posterior-expectation", I, T)
        assert np.all(a <= b)

    def test_convex_combination(self, rng):
        prior = VariancePrior(6.0, 0.02)
        sv = draw_sample_variances(rng, 6.0, 0.02, 5, 1000)
        out = shrink(sv, prior, "posterior-expectation", 10, 5)
        m = prior.mean()
        assert np.all(out >= np.minimum(sv.s2, m) * (1 - 1e-12))
        assert np.all(out <= np.maximum(sv.s2, m) * (1 + 1e-12))

    def test_nonpositive_denominator(self):
        with pytest.raises(ValueError, match="denominator"):
            shrink(SampleVariances(np.array([0.1]), 1), VariancePrior(0.5, 0.1), "posterior-expectation", 3, 2)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            shrink(self.sv, self.prior, "median", 10, 5)

    def test_common_variance_prior(self):
        out = shrink(SampleVariances(np.array([0.3, 0.01]), 5), VariancePrior(math.inf, 0.02), "ebarrays", 10, 5)
        np.testing.assert_array_equal(out, 0.02)


class TestQuantileGrid:
    def test_single_point_is_median(self):
        nu, phi = 3.546, 0.00509
        grid = quantile_grid(VariancePrior(nu, phi), 1)
        assert scaled_inv_chi2_cdf(grid[0], nu, phi) == pytest.approx(0.5, abs=1e-12)

    def test_nu2_against_independent_inversion(self):
        grid = quantile_grid(VariancePrior(2.0, 1.0), 3)
        expect = [bisect_quantile(2.0, 1.0, q / 4) for q in (1, 2, 3)]
        np.testing.assert_allclose(grid, expect, rtol=1e-12)
        # nu = 2: chi2_2 is exponential, so sigma^2_q = 2 / (-2 log q') with q' = q/(Q+1)
        np.testing.assert_allclose(grid, [-1.0 / math.log(q / 4) for q in (1, 2, 3)], rtol=1e-13)

    def test_large_grid_mean(self):
        nu, phi = 8.186, 0.00249
        grid = quantile_grid(VariancePrior(nu, phi), 10000)
        assert grid.mean() == pytest.approx(nu * phi / (nu - 2), rel=0.01)

    @pytest.mark.parametrize("nu,phi", [(3.546, 0.00509), (8.186, 0.00249), (0.7, 2.0), (400.0, 1e-3)])
    def test_cdf_round_trip(self, nu, phi):
        Q = 1000
        grid = quantile_grid(VariancePrior(nu, phi), Q)
        assert np.all(np.diff(grid) > 0)
        np.testing.assert_allclose(scaled_inv_chi2_cdf(grid, nu, phi), np.arange(1, Q + 1) / (Q + 1), rtol=0, atol=1e-8)

    def test_common_variance_grid_is_constant(self):
        np.testing.assert_array_equal(quantile_grid(VariancePrior(math.inf, 0.3), 5), 0.3)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            quantile_grid(VariancePrior(4.0, 0.1), 0)


def test_prior_validation():
    with pytest.raises(ValueError):
        VariancePrior(-1.0, 0.1)
    with pytest.raises(ValueError):
        VariancePrior(3.0, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert VariancePrior(4.0, 0.1).mean() == pytest.approx(0.2)
