import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stochinv.distributions import RandomSource
from stochinv.mcmc import TargetError
from stochinv.models import DAMAGE_BOX, damage_model, generate_damage_data, landgraf_morrow
from stochinv.pca import fit_pca, project
from stochinv.pce import evaluate, fit_from_samples
from stochinv.transform import (
    InfeasibleProblemError,
    InsufficientSimulationError,
    KernelCopulaDensity,
    TransformMCMCConfig,
    TransformProblem,
    build_kernel_copula_density,
    build_pca_data_density,
    estimate_latent_correlation,
    iterate_correlation,
    log_target,
    pca_problem,
    sample_parameters,
    uniform_box_sampler,
)

QUICK = TransformMCMCConfig(n_steps=5000, window=500)
LO = [b[0] for b in DAMAGE_BOX]
HI = [b[1] for b in DAMAGE_BOX]


class NormalDensity:
    """Independent standard normal data density, optionally offset by a constant."""
    variant = "test_normal"

    def __init__(self, offset=0.0):
        self.offset = offset

    def log_density(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return float(np.sum(stats.norm.logpdf(z))) + self.offset

    def reduce_jacobian(self, J):
        return J

    def summary(self):
        return {"variant": self.variant}


class UniformDensity(NormalDensity):
    def log_density(self, z):
        z = np.asarray(z, dtype=float)
        return 0.0 if np.all((z >= 0) & (z <= 1)) else -math.inf


def linear_problem(A, lower, upper, density=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return TransformProblem(lambda x: A @ x, lambda x: A, density or NormalDensity(), lower, upper)


@pytest.fixture(scope="module")
def damage_data():
    return generate_damage_data(RandomSource(2024).derive(0))


@pytest.fixture(scope="module")
def damage_problem(damage_data):
    tensile, cyclic = damage_data
    model = damage_model()
    dens = build_kernel_copula_density(tensile, cyclic, model, LO, HI, 4000, RandomSource(1))
    return TransformProblem(model, model.jacobian, dens, LO, HI, names=["S", "s"])


@settings(max_examples=50, deadline=None)
@given(st.floats(-9.9, 9.9))
def test_linear_change_of_variables(x):
    p = linear_problem([[2.0]], [-10.0], [10.0])
    assert log_target(p, [x]) == pytest.approx(stats.norm.logpdf(x, 0, 0.5), abs=1e-10)


def test_identity_with_uniform_density_is_flat():
    p = TransformProblem(lambda x: x, lambda x: np.eye(2), UniformDensity(), [0, 0], [1, 1])
    vals = {log_target(p, x) for x in ([0.1, 0.2], [0.5, 0.5], [0.99, 0.01])}
    assert vals == {0.0}
    assert log_target(p, [1.2, 0.5]) == -math.inf


def test_outside_box_and_singular_jacobian():
    p = linear_problem([[1.0, 2.0], [2.0, 4.0]], [0, 0], [1, 1])
    assert log_target(p, [0.5, 0.5]) == -math.inf
    q = linear_problem(np.eye(2), [0, 0], [1, 1])
    assert log_target(q, [-0.1, 0.5]) == -math.inf
    assert np.isfinite(log_target(q, [0.0, 1.0]))


def test_nan_density_is_an_error():
    class NanDensity(NormalDensity):
        def log_density(self, z):
            return float("nan")

    p = linear_problem([[1.0]], [0.0], [1.0], NanDensity())
    with pytest.raises(TargetError):
        log_target(p, [0.5])


def test_non_square_reduced_jacobian_rejected():
    p = TransformProblem(lambda x: x[:1], lambda x: np.array([[1.0, 0.0]]), NormalDensity(), [0, 0], [1, 1])
    with pytest.raises(ValueError, match="square"):
        log_target(p, [0.5, 0.5])


def test_feasible_box_validation():
    with pytest.raises(ValueError):
        linear_problem([[1.0]], [1.0], [0.0])
    with pytest.raises(ValueError):
        linear_problem([[1.0]], [0.0], [math.inf])


def test_damage_log_target_term_by_term(damage_data, damage_problem):
    tensile, cyclic = damage_data
    dens = damage_problem.density
    x = np.array([0.6, 1.9])
    z = np.array([x[0], landgraf_morrow(x[0], x[1])])
    log_f, u = 0.0, []
    for obs, zi in ((tensile.data.ravel(), z[0]), (cyclic.data.ravel(), z[1])):
        h = 1.06 * np.std(obs, ddof=1) * obs.size ** (-0.2)
        log_f += math.log(np.mean(stats.norm.pdf((zi - obs) / h)) / h)
        u.append(stats.norm.ppf(np.mean(stats.norm.cdf((zi - obs) / h))))
    rho = dens.rho
    log_c = (stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]]).logpdf(u)
             - stats.norm.logpdf(u[0]) - stats.norm.logpdf(u[1]))
    # d(strain)/dS = 1, d(strain)/ds = 0, so |det J| = |dN_f/ds|
    h = 1e-6
    dN_ds = (landgraf_morrow(x[0], x[1] + h) - landgraf_morrow(x[0], x[1] - h)) / (2 * h)
    expected = log_f + log_c + math.log(abs(dN_ds))
    assert log_target(damage_problem, x) == pytest.approx(expected, rel=1e-7)


def test_pca_density_variances_are_top_eigenvalues():
    Z = np.random.default_rng(0).normal(size=(568, 16)) * np.linspace(2, 0.1, 568)[:, None]
    dens = build_pca_data_density(Z, 6)
    centered = Z - Z.mean(axis=1, keepdims=True)
    w = np.linalg.eigvalsh(centered.T @ centered / 15)[::-1]
    assert np.allclose(dens.marginals.stds**2, w[:6], rtol=1e-10)


def test_pca_density_single_component():
    Z = np.random.default_rng(1).normal(size=(5, 20))
    dens = build_pca_data_density(Z, 1)
    q = project(dens.basis, Z)[0]
    assert dens.marginals.means[0] == pytest.approx(q.mean(), abs=1e-12)
    assert dens.marginals.stds[0] == pytest.approx(q.std(ddof=1), rel=1e-10)


def test_pca_density_whitened_data():
    g = np.random.default_rng(2)
    Z = g.normal(size=(4, 60))
    Z -= Z.mean(axis=1, keepdims=True)
    L = np.linalg.cholesky(np.cov(Z))
    Z = np.linalg.solve(L, Z)
    dens = build_pca_data_density(Z, 4)
    assert np.allclose(dens.marginals.means, 0.0, atol=1e-12)
    assert np.allclose(dens.marginals.stds, 1.0, atol=1e-10)


def test_pca_orthonormal_linear_map_reduces_to_component_density():
    Z = np.random.default_rng(3).normal(size=(12, 30)) * np.linspace(3, 0.2, 12)[:, None]
    dens = build_pca_data_density(Z, 3)
    V, mu = dens.basis.components, dens.basis.mean
    p = TransformProblem(lambda x: mu + V @ x, lambda x: V, dens, [-5] * 3, [5] * 3)
    for x in np.random.default_rng(4).uniform(-2, 2, size=(10, 3)):
        assert log_target(p, x) == pytest.approx(float(dens.marginals.log_density(x)), abs=1e-10)


def test_component_space_path_equals_response_space_path():
    g = np.random.default_rng(5)
    X = g.uniform(size=(80, 3))
    Y = np.column_stack([X[:, 0] + X[:, 1] ** 2, X[:, 1] - X[:, 2], X[:, 2] * X[:, 0] + X[:, 0],
                         np.sin(X[:, 0]), X.sum(1)])
    sur = fit_from_samples(X, Y, 2, np.full(3, 0.5), np.full(3, 0.3))
    Z = evaluate(sur, g.uniform(size=(25, 3))).T + 0.01 * g.normal(size=(5, 25))
    dens = build_pca_data_density(Z, 3)
    direct = TransformProblem(sur, sur.jacobian, dens, np.zeros(3), np.ones(3))
    reduced = pca_problem(sur, dens, np.zeros(3), np.ones(3))
    for x in g.uniform(size=(10, 3)):
        assert log_target(reduced, x) == pytest.approx(log_target(direct, x), rel=1e-9, abs=1e-9)


def test_inert_parameter_excluded_from_jacobian():
    # the second parameter has no effect; it stays uniform on the box
    p = TransformProblem(lambda x: np.array([2 * x[0]]), lambda x: np.array([[2.0, 0.0]]),
                         NormalDensity(), [-3, 0], [3, 1], active=[0])
    assert log_target(p, [0.3, 0.1]) == log_target(p, [0.3, 0.9])
    res = sample_parameters(p, TransformMCMCConfig(n_steps=20000, window=500), RandomSource(6))
    s = res.chain.samples
    assert abs(s[:, 1].mean() - 0.5) < 0.05
    assert abs(s[:, 0].std() - 0.5) < 0.05


def test_perfectly_correlated_pair():
    model = lambda X: np.column_stack([X[:, 0], X[:, 0] ** 3])
    rho = estimate_latent_correlation(model, uniform_box_sampler([0, 0], [1, 1]), 5000, RandomSource(7))
    assert rho >= 0.9


def test_ignored_parameter_gives_no_correlation():
    model = lambda X: np.column_stack([X[:, 0], X[:, 2]])
    rho = estimate_latent_correlation(model, uniform_box_sampler([0] * 3, [1] * 3), 10_000, RandomSource(8))
    assert abs(rho) < 0.1


def test_correlation_estimate_independent_of_threads():
    model = lambda X: np.column_stack([X[:, 0] + X[:, 1], X[:, 1]])
    draw = uniform_box_sampler([0, 0], [1, 1])
    a = estimate_latent_correlation(model, draw, 7000, RandomSource(9), threads=1)
    b = estimate_latent_correlation(model, draw, 7000, RandomSource(9), threads=4)
    assert a == b


def test_too_few_simulations():
    with pytest.raises(InsufficientSimulationError):
        estimate_latent_correlation(lambda X: X, uniform_box_sampler([0, 0], [1, 1]), 9, RandomSource(10))


def test_kernel_densities_integrate_to_one(damage_problem):
    dens = damage_problem.density
    for kde in (dens.kde_1, dens.kde_2):
        x = kde.samples
        grid = np.linspace(x.min() - 8 * kde.bandwidth, x.max() + 8 * kde.bandwidth, 20001)
        assert np.trapezoid(kde.pdf(grid), grid) == pytest.approx(1.0, abs=1e-3)


def test_copula_correlation_domain(damage_problem):
    with pytest.raises(ValueError):
        damage_problem.density.with_rho(1.0)
    k = damage_problem.density.with_rho(0.0)
    z = np.array([0.5, 200.0])
    assert isinstance(k, KernelCopulaDensity)
    assert k.log_density(z) == pytest.approx(float(k.kde_1.logpdf(z[0]) + k.kde_2.logpdf(z[1])), abs=0)


def test_normalization_constant_does_not_change_chain():
    a = sample_parameters(linear_problem([[2.0, 0.5], [0.0, 1.0]], [-3, -3], [3, 3]), QUICK, RandomSource(11))
    b = sample_parameters(linear_problem([[2.0, 0.5], [0.0, 1.0]], [-3, -3], [3, 3], NormalDensity(7.25)),
                          QUICK, RandomSource(11))
    assert np.array_equal(a.chain.states, b.chain.states)


def test_linear_gaussian_two_dimensional():
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    res = sample_parameters(linear_problem(A, [-6, -6], [6, 6]), TransformMCMCConfig(n_steps=60000),
                            RandomSource(12))
    cov = np.linalg.inv(A.T @ A)
    S = res.chain.samples
    assert np.allclose(S.mean(axis=0), 0.0, atol=0.05)
    assert np.allclose(np.cov(S.T), cov, atol=0.05)


def test_samples_stay_in_box_and_summary(damage_problem):
    res = sample_parameters(damage_problem, QUICK, RandomSource(13))
    S = res.chain.samples
    assert np.all((S >= LO) & (S <= HI))
    assert set(res.summary["parameters"]) == {"S", "s"}
    hist = res.summary["parameters"]["S"]["histogram"]
    assert sum(hist["counts"]) == S.shape[0]
    assert "S,s" in res.summary["correlation"]


def test_damage_identified_correlation_is_negative(damage_problem):
    res = sample_parameters(damage_problem, TransformMCMCConfig(n_steps=30000), RandomSource(14))
    assert res.summary["correlation"]["S,s"] < 0


def test_infeasible_problem():
    p = linear_problem([[1.0]], [0.0], [1.0], UniformDensity())
    shifted = TransformProblem(lambda x: x + 5, lambda x: np.eye(1), UniformDensity(), [0.0], [1.0])
    assert np.isfinite(log_target(p, [0.5]))
    with pytest.raises(InfeasibleProblemError):
        sample_parameters(shifted, QUICK, RandomSource(15))


def test_center_infeasible_falls_back_to_scan():
    p = TransformProblem(lambda x: x - 0.4, lambda x: np.eye(1), UniformDensity(), [0.0], [2.0])
    res = sample_parameters(p, QUICK, RandomSource(16))
    S = res.chain.samples[:, 0]
    assert np.all((S >= 0.4) & (S <= 1.4))


def test_samples_csv_layout(tmp_path):
    res = sample_parameters(linear_problem([[2.0]], [-2], [2]), QUICK, RandomSource(17))
    res.write_samples(tmp_path / "s.csv", ["x_1"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x_1,logp"
    assert len(lines) == 1 + res.chain.samples.shape[0]
    assert '"variant": "test_normal"' in res.density_json()


def test_iterate_zero_rounds_is_single_pass(damage_problem):
    _, results, trace = iterate_correlation(damage_problem, 0, QUICK, RandomSource(18), n_sim=2000)
    single = sample_parameters(damage_problem, QUICK, RandomSource(18).derive(0))
    assert len(results) == 1 and trace == [damage_problem.density.rho]
    assert np.array_equal(results[0].chain.states, single.chain.states)


def test_iterate_one_round_updates_correlation(damage_problem):
    final, results, trace = iterate_correlation(damage_problem, 1, QUICK, RandomSource(19), n_sim=2000)
    assert len(trace) == 2 and len(results) == 2
    assert trace[1] != trace[0]
    assert final.density.rho == trace[1]


def test_iterate_needs_kernel_copula():
    with pytest.raises(ValueError):
        iterate_correlation(linear_problem([[1.0]], [0], [1]), 1, QUICK, RandomSource(20))


def test_pca_basis_reused_by_density():
    Z = np.random.default_rng(21).normal(size=(6, 12))
    dens = build_pca_data_density(Z, 2)
    ref = fit_pca(Z, 2)
    assert np.array_equal(dens.basis.components, ref.components)
    assert dens.summary()["components"] == 2
