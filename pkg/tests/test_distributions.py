import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from stochinv.distributions import (
    CopulaBoundaryError,
    DistributionSpec,
    GaussianCopula,
    ParameterDomainError,
    RandomSource,
    copula_density,
    copula_sample,
    density_cdf_quantile,
    lhs_sample,
    sample,
)

N_BIG = 100_000

specs = st.one_of(
    st.builds(lambda a, w: DistributionSpec.uniform(a, a + w),
              st.floats(-5, 5), st.floats(0.1, 10)),
    st.builds(DistributionSpec.normal, st.floats(-5, 5), st.floats(0.1, 5)),
    st.builds(DistributionSpec.lognormal, st.floats(0.1, 5), st.floats(0.01, 2)),
    st.builds(lambda al, be, a, w: DistributionSpec.beta(al, be, a, a + w),
              st.floats(0.5, 8), st.floats(0.5, 8), st.floats(-2, 2), st.floats(0.1, 5)),
)


def test_uniform_sample_mean():
    x = sample(DistributionSpec.uniform(0, 1), RandomSource(1), N_BIG)
    assert abs(x.mean() - 0.5) <= 0.005
    assert x.min() >= 0 and x.max() <= 1


def test_scaled_beta_moments():
    spec = DistributionSpec.beta(2, 2, 0.1, 1.2)
    assert spec.mean == pytest.approx(0.65)
    assert spec.std == pytest.approx(1.1 * math.sqrt(4 / 80))
    x = sample(spec, RandomSource(2), N_BIG)
    se = spec.std / math.sqrt(N_BIG)
    assert abs(x.mean() - 0.65) < 4 * se
    assert x.std() == pytest.approx(0.2460, abs=0.002)


def test_lognormal_prescribed_moments():
    x = sample(DistributionSpec.lognormal(0.444, 0.052), RandomSource(3), N_BIG)
    assert abs(x.mean() - 0.444) <= 0.002
    assert x.std() == pytest.approx(0.052, rel=0.02)


@pytest.mark.parametrize("spec", [
    DistributionSpec.uniform(-1, 3),
    DistributionSpec.normal(2, 0.5),
    DistributionSpec.lognormal(0.263, 0.105),
    DistributionSpec.beta(2, 5, 0.1, 1.2),
])
def test_sample_moments_within_four_se(spec):
    x = sample(spec, RandomSource(11), N_BIG)
    se_mean = spec.std / math.sqrt(N_BIG)
    assert abs(x.mean() - spec.mean) < 4 * se_mean
    # sd of the sample sd from the fourth central moment
    m4 = np.mean((x - x.mean()) ** 4)
    se_std = math.sqrt(max(m4 - spec.std**4, 0.0) / N_BIG) / (2 * spec.std)
    assert abs(x.std() - spec.std) < 4 * se_std


def test_density_examples():
    pdf, cdf, _ = density_cdf_quantile(DistributionSpec.normal(0, 1), 0.0)
    assert cdf == 0.5
    pdf, _, _ = density_cdf_quantile(DistributionSpec.uniform(0.1, 1.2), 0.7)
    assert pdf == pytest.approx(1 / 1.1, abs=1e-14)
    pdf, _, _ = density_cdf_quantile(DistributionSpec.beta(2, 2), 0.5)
    assert pdf == pytest.approx(1.5, abs=1e-14)


def test_outside_support_and_quantile_domain():
    spec = DistributionSpec.beta(2, 2, 0.1, 1.2)
    pdf, cdf, quantile = density_cdf_quantile(spec, 1.5)
    assert pdf == 0.0 and cdf == 1.0
    pdf, cdf, _ = density_cdf_quantile(spec, -3.0)
    assert pdf == 0.0 and cdf == 0.0
    for q in (0.0, 1.0, -0.1, 1.2, float("nan")):
        with pytest.raises(ParameterDomainError):
            quantile(q)


@pytest.mark.parametrize("family,params", [
    ("normal", (0.0, 0.0)),
    ("normal", (0.0, -1.0)),
    ("uniform", (1.0, 1.0)),
    ("beta", (0.0, 2.0)),
    ("beta", (2.0, 2.0, 1.0, 0.5)),
    ("lognormal", (-1.0, 0.1)),
    ("gamma", (1.0, 1.0)),
])
def test_invalid_hyperparameters(family, params):
    with pytest.raises(ParameterDomainError):
        DistributionSpec(family, params)


def test_sample_count_must_be_positive():
    with pytest.raises(ParameterDomainError):
        sample(DistributionSpec.normal(0, 1), RandomSource(0), 0)


@given(specs, st.floats(0.001, 0.999))
def test_quantile_inverts_cdf(spec, q):
    x = spec.quantile(q)
    assert float(spec.quantile(spec.cdf(x))) == pytest.approx(float(x), abs=1e-10, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(specs)
def test_density_integrates_to_one(spec):
    lo, hi = spec.support
    # split at the mean so adaptive quadrature cannot step over a narrow peak
    f = lambda t: float(spec.pdf(t))
    m = spec.mean
    mass = integrate.quad(f, lo, m, limit=200)[0] + integrate.quad(f, m, hi, limit=200)[0]
    assert mass == pytest.approx(1.0, abs=1e-3)


@given(specs)
def test_serialization_round_trip(spec):
    assert DistributionSpec.from_dict(spec.to_dict()) == spec


def test_determinism_and_derived_streams():
    spec = DistributionSpec.normal(0, 1)
    a = sample(spec, RandomSource(42), 1000)
    b = sample(spec, RandomSource(42), 1000)
    assert np.array_equal(a, b)
    c = sample(spec, RandomSource(42).derive(1), 1000)
    d = sample(spec, RandomSource(42).derive(1), 1000)
    assert np.array_equal(c, d)
    assert not np.array_equal(a, c)
    assert not np.array_equal(c, sample(spec, RandomSource(42).derive(2), 1000))


def test_seed_domain():
    with pytest.raises(ParameterDomainError):
        RandomSource(-1)
    with pytest.raises(ParameterDomainError):
        RandomSource(2**64)


def test_lhs_four_strata():
    x = lhs_sample([DistributionSpec.uniform(0, 1)], RandomSource(5), 4)[:, 0]
    counts = np.histogram(x, bins=[0, 0.25, 0.5, 0.75, 1.0])[0]
    assert counts.tolist() == [1, 1, 1, 1]


def test_lhs_single_point():
    dom = [DistributionSpec.normal(0, 1), DistributionSpec.uniform(2, 3)]
    x = lhs_sample(dom, RandomSource(6), 1)
    assert x.shape == (1, 2)
    assert 2 <= x[0, 1] <= 3


def test_lhs_rank_histogram_chi_square():
    dom = [DistributionSpec.normal(0, 1), DistributionSpec.normal(5, 2)]
    n = 100
    x = lhs_sample(dom, RandomSource(7), n)
    for j, spec in enumerate(dom):
        strata = np.floor(spec.cdf(x[:, j]) * 10).astype(int)
        observed = np.bincount(strata, minlength=10)
        assert stats.chisquare(observed).pvalue > 0.001


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32))
def test_lhs_one_point_per_stratum(n, seed):
    dom = [DistributionSpec.uniform(0, 1), DistributionSpec.lognormal(0.3, 0.1)]
    x = lhs_sample(dom, RandomSource(seed), n)
    for j, spec in enumerate(dom):
        strata = np.minimum(np.floor(spec.cdf(x[:, j]) * n).astype(int), n - 1)
        assert np.array_equal(np.sort(strata), np.arange(n))


def test_copula_independence_is_exactly_one():
    c = GaussianCopula(0.0)
    u = np.linspace(0.001, 0.999, 57)
    U, V = np.meshgrid(u, u)
    assert np.all(copula_density(c, U, V) == 1.0)


def test_copula_center_value():
    assert copula_density(GaussianCopula(0.5), 0.5, 0.5) == pytest.approx(1 / math.sqrt(0.75), abs=1e-12)


def _copula_mass(rho: float) -> float:
    # substitute u = Phi(z) so the integrand is smooth on a bounded latent grid
    z = np.linspace(-8, 8, 801)
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    c = copula_density(GaussianCopula(rho), stats.norm.cdf(Z1), stats.norm.cdf(Z2))
    f = c * stats.norm.pdf(Z1) * stats.norm.pdf(Z2)
    return float(np.trapezoid(np.trapezoid(f, z, axis=1), z))


@pytest.mark.parametrize("rho", [-0.9, 0.0, 0.5, 0.9])
def test_copula_integrates_to_one(rho):
    assert _copula_mass(rho) == pytest.approx(1.0, abs=1e-3)


def test_copula_matches_bivariate_normal_ratio():
    rho, u, v = -0.7, 0.2, 0.85
    z1, z2 = stats.norm.ppf(u), stats.norm.ppf(v)
    ref = stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]]).pdf([z1, z2]) / (
        stats.norm.pdf(z1) * stats.norm.pdf(z2))
    assert copula_density(GaussianCopula(rho), u, v) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("u,v", [(0.0, 0.5), (0.5, 1.0), (1.0, 1.0), (0.0, 0.0)])
def test_copula_boundary_error(u, v):
    with pytest.raises(CopulaBoundaryError):
        copula_density(GaussianCopula(0.3), u, v)


@pytest.mark.parametrize("rho", [-1.0, 1.0, 1.5])
def test_copula_rho_domain(rho):
    with pytest.raises(ParameterDomainError):
        GaussianCopula(rho)


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.floats(-0.99, 0.99))
def test_copula_symmetric_and_positive(u, v, rho):
    c = GaussianCopula(rho)
    a = copula_density(c, u, v)
    assert a > 0
    assert a == pytest.approx(copula_density(c, v, u), rel=1e-12)


def test_copula_sample_independent_columns():
    n = 10_000
    m = DistributionSpec.uniform(0, 1)
    x = copula_sample(GaussianCopula(0.0, m, m), RandomSource(8), n)
    z = stats.norm.ppf(x)
    assert abs(np.corrcoef(z.T)[0, 1]) <= 3 / math.sqrt(n)


def test_copula_sample_latent_correlation():
    n = 10_000
    m = DistributionSpec.uniform(0, 1)
    x = copula_sample(GaussianCopula(0.9, m, m), RandomSource(9), n)
    z = stats.norm.ppf(x)
    assert np.corrcoef(z.T)[0, 1] == pytest.approx(0.9, abs=0.03)


def test_copula_sample_preserves_marginals():
    m1 = DistributionSpec.beta(2, 2, 0.1, 1.2)
    m2 = DistributionSpec.beta(2, 2, 1.0, 2.8)
    x = copula_sample(GaussianCopula(-0.6, m1, m2), RandomSource(10), 20_000)
    assert x[:, 0].mean() == pytest.approx(0.65, abs=0.01)
    assert stats.kstest(x[:, 0], m1.cdf).statistic < 0.015
    assert stats.kstest(x[:, 1], m2.cdf).statistic < 0.015
    assert stats.spearmanr(x[:, 0], x[:, 1])[0] < -0.5


def test_copula_joint_logpdf_at_zero_rho_is_product():
    m1 = DistributionSpec.beta(2, 2, 0.1, 1.2)
    m2 = DistributionSpec.lognormal(1.0, 0.3)
    x1, x2 = np.array([0.3, 0.9]), np.array([0.8, 1.4])
    joint = GaussianCopula(0.0, m1, m2).joint_logpdf(x1, x2)
    assert np.array_equal(joint, m1.logpdf(x1) + m2.logpdf(x2))
