"""Parameter distributions from data densities by a change of variables.

The parameter density is the pushed-back data density
``f_X(x) = f_Z(g(x)) |det J(x)|`` on the feasible box, sampled by random-walk
Metropolis. Two data densities are provided: independent normal laws on
principal components of a response ensemble, and per-observable normal-kernel
densities coupled by a Gaussian copula for observables measured on different
specimens.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .diagnostics import GaussianKDE
from .distributions import RandomSource, gaussian_copula_logdensity_latent, latent_normal
from .mcmc import Chain, ProposalSpec, TargetError, run_chain, tune_proposal
from .models import ObservationEnsemble
from .pca import (
    SINGULAR_DET,
    ComponentMarginals,
    PCABasis,
    fit_component_marginals,
    fit_pca,
    project,
)
from .pce import PCESurrogate

logger = logging.getLogger(__name__)

RHO_CLIP = 0.999


class InsufficientSimulationError(ValueError):
    pass


class InfeasibleProblemError(RuntimeError):
    """No point with finite target density was found in the feasible box."""


# ---------------------------------------------------------------------------
# data densities
# ---------------------------------------------------------------------------

@dataclass
class PCADataDensity:
    """Independent normal laws on the retained principal components."""

    basis: PCABasis
    marginals: ComponentMarginals
    variant: str = field(default="pca_marginals", init=False)

    def log_density(self, z) -> float:
        return float(self.marginals.log_density(project(self.basis, np.asarray(z, dtype=float))))

    def log_density_components(self, q) -> float:
        return float(self.marginals.log_density(np.asarray(q, dtype=float)))

    def reduce_jacobian(self, J: np.ndarray) -> np.ndarray:
        return self.basis.components.T @ J

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "components": self.basis.r,
            "marginals": self.marginals.to_dict(),
            "pca": self.basis.discarded_report(),
        }


@dataclass
class KernelCopulaDensity:
    """Kernel marginals for two observables joined by a Gaussian copula."""

    kde_1: GaussianKDE
    kde_2: GaussianKDE
    rho: float
    variant: str = field(default="kernel_copula", init=False)

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError("copula correlation must lie in (-1, 1)")

    def log_density(self, z) -> float:
        z = np.asarray(z, dtype=float)
        lp = float(self.kde_1.logpdf(z[0]) + self.kde_2.logpdf(z[1]))
        if self.rho == 0.0:
            return lp
        u1 = latent_normal(self.kde_1.cdf(z[0]), self.kde_1.sf(z[0]))
        u2 = latent_normal(self.kde_2.cdf(z[1]), self.kde_2.sf(z[1]))
        return lp + float(gaussian_copula_logdensity_latent(u1, u2, self.rho))

    def reduce_jacobian(self, J: np.ndarray) -> np.ndarray:
        return J

    def with_rho(self, rho: float) -> "KernelCopulaDensity":
        return KernelCopulaDensity(self.kde_1, self.kde_2, float(rho))

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "kde": [self.kde_1.to_dict(), self.kde_2.to_dict()],
            "rho": self.rho,
        }


def build_pca_data_density(Z, r: int) -> PCADataDensity:
    basis = fit_pca(Z, r)
    return PCADataDensity(basis, fit_component_marginals(basis, Z))


def _ensemble_values(ens) -> np.ndarray:
    data = ens.data if isinstance(ens, ObservationEnsemble) else np.asarray(ens, dtype=float)
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("observation ensemble is empty")
    return x


def uniform_box_sampler(lower, upper) -> Callable:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def draw(rng: RandomSource, n: int) -> np.ndarray:
        return lower + (upper - lower) * rng.gen.random((n, lower.size))

    return draw


def latent_rank_correlation(a, b) -> float:
    """Pearson correlation of probit-transformed ranks."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.size
    za = special.ndtri(stats.rankdata(a) / (n + 1))
    zb = special.ndtri(stats.rankdata(b) / (n + 1))
    if np.ptp(za) == 0 or np.ptp(zb) == 0:
        return 0.0
    return float(np.corrcoef(za, zb)[0, 1])


def estimate_latent_correlation(model: Callable, draw: Callable, n_sim: int, rng: RandomSource,
                                outputs: tuple[int, int] = (0, 1), batch_size: int = 2000,
                                threads: int = 1) -> float:
    """Latent-normal correlation of two simulated observables.

    Parameters come from ``draw(rng, n)``; batches use derived seeds, so the
    result does not depend on ``threads``.
    """
    if n_sim < 10:
        raise InsufficientSimulationError(f"need at least 10 simulations, got {n_sim}")
    sizes = [min(batch_size, n_sim - s) for s in range(0, n_sim, batch_size)]

    def run(k):
        X = draw(rng.derive(k), sizes[k])
        return np.atleast_2d(model(X))[:, list(outputs)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    Y = np.concatenate(parts)
    rho = latent_rank_correlation(Y[:, 0], Y[:, 1])
    clipped = float(np.clip(rho, -RHO_CLIP, RHO_CLIP))
    if clipped != rho:
        logger.warning("latent correlation %.6f clipped to %.3f", rho, clipped)
    return clipped


def build_kernel_copula_density(ens_a, ens_b, model: Callable, lower, upper, n_sim: int,
                                rng: RandomSource, outputs: tuple[int, int] = (0, 1),
                                threads: int = 1) -> KernelCopulaDensity:
    """Kernel density per observable; copula correlation from simulations uniform on the box."""
    xa, xb = _ensemble_values(ens_a), _ensemble_values(ens_b)
    rho = estimate_latent_correlation(model, uniform_box_sampler(lower, upper), n_sim, rng,
                                      outputs, threads=threads)
    return KernelCopulaDensity(GaussianKDE(xa), GaussianKDE(xb), rho)


# ---------------------------------------------------------------------------
# problem and target
# ---------------------------------------------------------------------------

@dataclass
class TransformProblem:
    """Forward map with Jacobian, data density and feasible box.

    ``active`` selects the parameters that enter the change of variables; the
    remaining ones do not affect the target and are uniform on the box.
    With ``component_space`` the forward map already returns principal
    component scores and its Jacobian is the reduced one.
    """

    forward: Callable
    jacobian: Callable
    density: object
    lower: np.ndarray
    upper: np.ndarray
    active: np.ndarray | None = None
    component_space: bool = False
    names: list[str] | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("feasible box needs lower < upper per parameter")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("feasible box must be bounded")
        if self.active is not None:
            self.active = np.asarray(self.active, dtype=int)
        if self.names is None:
            self.names = [f"x_{j + 1}" for j in range(self.n_x)]

    @property
    def n_x(self) -> int:
        return self.lower.size

    @property
    def active_index(self) -> np.ndarray:
        return np.arange(self.n_x) if self.active is None else self.active


def log_target(problem: TransformProblem, x) -> float:
    """``log f_Z(g(x)) + log|det J|``; -inf outside the box or at singular Jacobians."""
    x = np.asarray(x, dtype=float)
    if np.any(x < problem.lower) or np.any(x > problem.upper):
        return -math.inf
    y = np.asarray(problem.forward(x), dtype=float)
    J = np.atleast_2d(np.asarray(problem.jacobian(x), dtype=float))[:, problem.active_index]
    if problem.component_space:
        Jr = J
        lz = problem.density.log_density_components(y)
    else:
        Jr = problem.density.reduce_jacobian(J)
        lz = problem.density.log_density(y)
    if Jr.shape[0] != Jr.shape[1]:
        raise ValueError(f"reduced Jacobian is {Jr.shape[0]} x {Jr.shape[1]}; it must be square")
    det = abs(float(np.linalg.det(Jr)))
    if math.isnan(lz) or math.isnan(det):
        raise TargetError(f"transformed density is NaN at x={x.tolist()}")
    if not math.isfinite(det) or det < SINGULAR_DET:
        return -math.inf
    return lz + math.log(det)


def project_surrogate(surrogate: PCESurrogate, basis: PCABasis) -> PCESurrogate:
    """Surrogate for the component scores ``components^T (g(x) - mean)``."""
    coeffs = surrogate.coeffs @ basis.components
    if np.any(surrogate.indices.indices[0] != 0):
        raise ValueError("multi-index set must start with the constant term")
    coeffs[0] -= basis.components.T @ basis.mean
    return PCESurrogate(surrogate.indices, coeffs, surrogate.shift, surrogate.scale)


def pca_problem(surrogate: PCESurrogate, density: PCADataDensity, lower, upper,
                active=None, names=None) -> TransformProblem:
    """PCA-variant problem evaluated directly in component space."""
    q_sur = project_surrogate(surrogate, density.basis)
    return TransformProblem(q_sur, q_sur.jacobian, density, lower, upper, active,
                            component_space=True, names=names)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class TransformMCMCConfig:
    n_steps: int = 100000
    burn_in_fraction: float = 0.2
    band: tuple[float, float] = (0.20, 0.50)
    factor: float = 1.5
    window: int = 1000
    max_tune_rounds: int = 50
    initial_step_fraction: float = 0.1
    scan_points: int = 2000
    histogram_bins: int = 30


@dataclass
class TransformResult:
    chain: Chain
    proposal: ProposalSpec
    summary: dict
    density_summary: dict

    def write_samples(self, path, names: Sequence[str]) -> None:
        S = self.chain.samples
        lp = self.chain.post_log_densities
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*names, "logp"])
            for row, v in zip(S, lp):
                w.writerow([*(repr(float(a)) for a in row), repr(float(v))])

    def density_json(self) -> str:
        return json.dumps(self.density_summary, indent=2, sort_keys=True)


def find_initial_point(problem: TransformProblem, rng: RandomSource, n_scan: int = 2000) -> np.ndarray:
    """Box center if feasible, otherwise the best point of a uniform scan."""
    center = 0.5 * (problem.lower + problem.upper)
    if log_target(problem, center) > -math.inf:
        return center
    X = uniform_box_sampler(problem.lower, problem.upper)(rng, n_scan)
    vals = np.array([log_target(problem, x) for x in X])
    if not np.any(np.isfinite(vals)):
        raise InfeasibleProblemError(f"no finite-density point among {n_scan} scanned points")
    logger.info("box center infeasible; starting from best of %d scanned points", n_scan)
    return X[int(np.argmax(vals))]


def sample_summary(samples: np.ndarray, lower, upper, names, bins: int = 30) -> dict:
    corr = np.corrcoef(samples.T) if samples.shape[1] > 1 else np.ones((1, 1))
    out = {"n": int(samples.shape[0]), "parameters": {}, "correlation": {}}
    for j, n in enumerate(names):
        counts, edges = np.histogram(samples[:, j], bins=bins, range=(lower[j], upper[j]))
        out["parameters"][n] = {
            "mean": float(samples[:, j].mean()),
            "std": float(samples[:, j].std(ddof=1)),
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            v = corr[a, b]
            out["correlation"][f"{names[a]},{names[b]}"] = None if not np.isfinite(v) else float(v)
    return out


def sample_parameters(problem: TransformProblem, config: TransformMCMCConfig,
                      rng: RandomSource, init=None) -> TransformResult:
    def target(x):
        return log_target(problem, x)

    x0 = find_initial_point(problem, rng.derive(0), config.scan_points) if init is None else np.asarray(init, float)
    step0 = config.initial_step_fraction * (problem.upper - problem.lower)
    proposal = tune_proposal(target, x0, rng.derive(1), config.band, step0, config.factor,
                             config.window, config.max_tune_rounds)
    chain = run_chain(target, proposal, x0, config.n_steps, config.burn_in_fraction, rng.derive(2))
    summary = sample_summary(chain.samples, problem.lower, problem.upper, problem.names,
                             config.histogram_bins)
    summary["acceptance_rate"] = chain.acceptance_rate
    summary["proposal_stds"] = proposal.stds.tolist()
    return TransformResult(chain, proposal, summary, problem.density.summary())


def iterate_correlation(problem: TransformProblem, rounds: int, config: TransformMCMCConfig,
                        rng: RandomSource, n_sim: int = 10000, outputs: tuple[int, int] = (0, 1),
                        threads: int = 1):
    """Alternate sampling and re-estimating the copula correlation.

    After each round the correlation is re-estimated from simulations whose
    parameters are drawn from the current identified samples. Returns
    ``(final problem, results per pass, correlation trace)``.
    """
    if problem.density.variant != "kernel_copula":
        raise ValueError("correlation iteration needs the kernel-copula data density")
    results = [sample_parameters(problem, config, rng.derive(0))]
    trace = [problem.density.rho]
    for k in range(1, rounds + 1):
        S = results[-1].chain.samples

        def draw(r: RandomSource, n: int, S=S):
            return S[r.gen.integers(0, S.shape[0], n)]

        rho = estimate_latent_correlation(problem.forward, draw, n_sim, rng.derive(1000 + k),
                                          outputs, threads=threads)
        logger.info("correlation round %d: %.4f -> %.4f", k, trace[-1], rho)
        problem = replace(problem, density=problem.density.with_rho(rho))
        trace.append(rho)
        results.append(sample_parameters(problem, config, rng.derive(k)))
    return problem, results, trace
