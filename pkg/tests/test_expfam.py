import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from hmeglm.expfam import (
    DomainError,
    ExpFamily,
    bernoulli,
    boundedness_diagnostics,
    exponential,
    gaussian,
    parse_family,
    poisson,
    truncated_exponential,
    truncated_poisson,
)
from hmeglm.metrics import integrate_y, y_rule

from conftest import ALL_FAMILIES, family_id

H_GRID = np.linspace(-5.0, 5.0, 41)


def test_log_density_point_values():
    assert bernoulli().log_density(0.0, 1.0) == pytest.approx(math.log(0.5), abs=1e-15)
    assert poisson().log_density(0.0, 0.0) == pytest.approx(-1.0, abs=1e-15)
    assert gaussian(1.0).log_density(0.3, 0.3) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_truncated_poisson_normalizer_by_direct_sum():
    # oracle: normalizer at h=0 is sum_j 1/j! over 0..K
    Z = sum(1.0 / math.factorial(j) for j in range(6))
    assert truncated_poisson(5).log_density(0.0, 0.0) == pytest.approx(-math.log(Z), abs=1e-14)
    for y in range(6):
        expected = 2.0 * y - math.lgamma(y + 1) - math.log(sum(math.exp(2.0 * j) / math.factorial(j) for j in range(6)))
        assert truncated_poisson(5).log_density(2.0, float(y)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "fam, h, frozen",
    [
        (gaussian(0.7), 0.4, stats.norm(0.4, 0.7)),
        (poisson(), 1.3, stats.poisson(math.exp(1.3))),
        (exponential(), 0.5, stats.expon(scale=math.exp(0.5))),
        (truncated_exponential(2.0), 0.5, stats.truncexpon(b=2.0 / math.exp(0.5), scale=math.exp(0.5))),
    ],
    ids=["gaussian", "poisson", "exponential", "truncated_exponential"],
)
def test_log_density_matches_scipy(fam, h, frozen):
    ys = np.array([0.0, 1.0, 2.0, 5.0]) if fam.discrete else np.array([0.1, 0.5, 1.5, 1.9])
    logpdf = frozen.logpmf(ys) if fam.discrete else frozen.logpdf(ys)
    np.testing.assert_allclose(fam.log_density(h, ys), logpdf, rtol=1e-12, atol=1e-12)


def test_mean_link_values():
    assert bernoulli().mean_link(0.0) == pytest.approx(0.5)
    assert gaussian().mean_link(1.7) == pytest.approx(1.7)
    assert poisson().mean_link(1.0) == pytest.approx(math.e, rel=1e-15)


def test_second_moment_values():
    h = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(bernoulli().second_moment_link(h), bernoulli().mean_link(h), rtol=1e-15)
    assert poisson().second_moment_link(0.0) == pytest.approx(2.0)
    assert gaussian(1.0).second_moment_link(0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("fam", ALL_FAMILIES, ids=family_id)
def test_normalization_and_moments(fam):
    rule = y_rule(fam, -5.0, 5.0)
    np.testing.assert_allclose(integrate_y(fam, H_GRID, rule, 0), 1.0, atol=1e-8)
    np.testing.assert_allclose(integrate_y(fam, H_GRID, rule, 1), fam.mean_link(H_GRID), rtol=1e-8, atol=1e-6)
    np.testing.assert_allclose(integrate_y(fam, H_GRID, rule, 2), fam.second_moment_link(H_GRID), rtol=1e-8, atol=1e-6)


@pytest.mark.parametrize("fam", [gaussian(1.0), exponential(), truncated_exponential(3.0)], ids=family_id)
def test_continuous_normalization_against_adaptive_quadrature(fam):
    lo, hi = fam.support
    for h in (-1.0, 0.0, 1.5):
        val, _ = integrate.quad(lambda y: float(fam.density(h, y)), lo, hi, limit=200)
        assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("fam", ALL_FAMILIES, ids=family_id)
def test_mean_link_strictly_increasing(fam):
    assert np.all(np.diff(fam.mean_link(H_GRID)) > 0)


@pytest.mark.parametrize("fam", ALL_FAMILIES, ids=family_id)
def test_score_and_fisher_info_match_finite_differences(fam, rng):
    h = np.linspace(-2.0, 2.0, 9)
    y = fam.sample(h, rng)
    eps = 1e-6
    fd = (fam.log_density(h + eps, y) - fam.log_density(h - eps, y)) / (2 * eps)
    np.testing.assert_allclose(fam.score(h, y), fd, rtol=1e-6, atol=1e-7)
    # expected information equals variance of the score
    rule = y_rule(fam, -2.0, 2.0)
    dens = np.exp(fam.log_density(h[:, None], rule.points[None, :]))
    var_score = (dens * fam.score(h[:, None], rule.points[None, :]) ** 2) @ rule.weights
    np.testing.assert_allclose(fam.fisher_info(h), var_score, rtol=1e-7)


def test_sampling_moments():
    rng = np.random.default_rng(1)
    n = 100_000
    assert abs(bernoulli().sample(np.zeros(n), rng).mean() - 0.5) < 0.01
    assert abs(poisson().sample(np.zeros(n), rng).mean() - 1.0) < 0.015
    assert abs(gaussian(1.0).sample(np.full(n, 2.0), rng).var() - 1.0) < 0.02


@pytest.mark.parametrize("fam", [truncated_poisson(5), truncated_exponential(3.0), exponential()], ids=family_id)
def test_sampling_means_for_other_families(fam):
    rng = np.random.default_rng(2)
    h = np.full(200_000, 0.3)
    draws = fam.sample(h, rng)
    assert np.all(fam.in_support(draws))
    sd = math.sqrt(float(fam.variance(0.3)) / h.size)
    assert abs(draws.mean() - float(fam.mean_link(0.3))) < 5 * sd


def test_domain_errors():
    with pytest.raises(DomainError):
        bernoulli().log_density(0.0, 0.5)
    with pytest.raises(DomainError):
        poisson().log_density(0.0, -1.0)
    with pytest.raises(DomainError):
        exponential().log_density(0.0, 0.0)
    with pytest.raises(DomainError):
        truncated_poisson(3).log_density(0.0, 4.0)
    with pytest.raises(DomainError):
        poisson().log_density(np.nan, 1.0)
    with pytest.raises(ValueError):
        gaussian(0.0)
    with pytest.raises(ValueError):
        truncated_poisson(0)
    with pytest.raises(ValueError):
        ExpFamily("gamma")


def test_clamping_keeps_values_finite():
    fam = poisson()
    val = fam.log_density(1e3, 3.0)
    assert np.isfinite(val)
    assert fam.log_density(1e3, 3.0) == fam.log_density(30.0, 3.0)
    assert np.isfinite(exponential().log_density(-500.0, 1.0))


@pytest.mark.parametrize("fam", ALL_FAMILIES, ids=family_id)
def test_tagged_record_round_trip(fam):
    assert ExpFamily.from_dict(fam.to_dict()) == fam


def test_parse_family():
    assert parse_family("poisson") == poisson()
    assert parse_family("truncated_poisson:30") == truncated_poisson(30)
    assert parse_family("gaussian:0.5") == gaussian(0.5)
    assert parse_family("logistic") == bernoulli()
    assert ExpFamily.from_dict({"family": "gaussian", "sigma": 1.0}) == gaussian(1.0)


def test_boundedness_diagnostics():
    for fam in (bernoulli(), truncated_poisson(30), truncated_exponential(3.0)):
        rep = boundedness_diagnostics(fam)
        assert rep.lower_bound_positive, fam
    for fam in (poisson(), gaussian()):
        rep = boundedness_diagnostics(fam)
        assert not rep.lower_bound_positive
        assert np.isfinite(rep.sup_density) and np.isfinite(rep.sup_abs_dh_density)


@settings(max_examples=60, deadline=None)
@given(h=st.floats(-8.0, 8.0), k=st.integers(1, 40))
def test_truncated_poisson_moments_property(h, k):
    fam = truncated_poisson(k)
    j = np.arange(k + 1, dtype=float)
    p = np.exp(fam.log_density(h, j))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert float(fam.mean_link(h)) == pytest.approx(float(p @ j), rel=1e-10, abs=1e-12)
    assert float(fam.second_moment_link(h)) == pytest.approx(float(p @ j**2), rel=1e-10, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(h=st.floats(-6.0, 6.0), T=st.floats(0.05, 50.0))
def test_truncated_exponential_moments_property(h, T):
    fam = truncated_exponential(T)
    m1, _ = integrate.quad(lambda y: y * float(fam.density(h, y)), 0.0, T, epsabs=1e-13, epsrel=1e-11)
    m2, _ = integrate.quad(lambda y: y * y * float(fam.density(h, y)), 0.0, T, epsabs=1e-13, epsrel=1e-11)
    assert float(fam.mean_link(h)) == pytest.approx(m1, rel=1e-8, abs=1e-12)
    assert float(fam.second_moment_link(h)) == pytest.approx(m2, rel=1e-8, abs=1e-12)
