"""Hierarchical Bayesian identification of parameter distributions.

Every specimen ``i`` carries its own parameter vector ``x_i`` drawn from a
structural prior ``p(x | theta)``; the hyperparameters ``theta`` get a uniform
box hyperprior. The joint posterior over all ``x_i`` and ``theta`` is sampled
by Metropolis-within-Gibbs sweeps: conditionally independent specimen blocks
are moved simultaneously, then the hyperparameter block is moved.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import special

from .distributions import (
    DistributionSpec,
    GaussianCopula,
    RandomSource,
    gaussian_copula_logdensity_latent,
    latent_normal,
)
from .mcmc import Chain, InitializationError, TargetError, TuningError, batch_metropolis
from .models import (
    DAMAGE_BOX,
    DAMAGE_STRAIN_RANGE,
    ForwardModel,
    ObservationEnsemble,
    damage_model,
    landgraf_morrow,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# structural priors
# ---------------------------------------------------------------------------

class StructuralPrior(Protocol):
    n_x: int
    n_theta: int
    theta_names: list[str]
    names: list[str]

    def log_density(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray: ...
    def marginal_pdf(self, j: int, grid: np.ndarray, theta: np.ndarray) -> np.ndarray: ...
    def sample(self, theta: np.ndarray, rng: RandomSource, n: int) -> np.ndarray: ...
    def median(self, theta: np.ndarray) -> np.ndarray: ...
    def derived(self, theta: np.ndarray) -> dict: ...
    def step_hint(self, theta: np.ndarray) -> np.ndarray: ...


def _lognormal_moments_to_log(mean, std):
    s2 = np.log1p((std / mean) ** 2)
    return np.log(mean) - 0.5 * s2, np.sqrt(s2)


class LognormalPrior:
    """Independent lognormal laws, each with its own mean and std as hyperparameters.

    Hyperparameter layout: ``(mean_1, std_1, mean_2, std_2, ...)``.
    """

    def __init__(self, n_x: int, names: Sequence[str] | None = None):
        self.n_x = n_x
        self.n_theta = 2 * n_x
        self.names = list(names or [f"x{j + 1}" for j in range(n_x)])
        self.theta_names = [f"{k}_{n}" for n in self.names for k in ("mean", "std")]

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[0::2], theta[1::2]

    def log_density(self, X, theta):
        X = np.atleast_2d(X)
        mu, sd = self._split(theta)
        if np.any(mu <= 0) or np.any(sd <= 0):
            return np.full(X.shape[0], -np.inf)
        m, s = _lognormal_moments_to_log(mu, sd)
        pos = np.all(X > 0, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(np.where(X > 0, X, 1.0))
            val = -lx - np.log(s) - 0.5 * LOG_2PI - 0.5 * ((lx - m) / s) ** 2
        return np.where(pos, val.sum(axis=1), -np.inf)

    def marginal_pdf(self, j, grid, theta):
        mu, sd = self._split(theta)
        return DistributionSpec.lognormal(mu[j], sd[j]).pdf(grid)

    def sample(self, theta, rng, n):
        mu, sd = self._split(theta)
        m, s = _lognormal_moments_to_log(mu, sd)
        return rng.gen.lognormal(m, s, size=(n, self.n_x))

    def median(self, theta):
        mu, sd = self._split(theta)
        m, _ = _lognormal_moments_to_log(mu, sd)
        return np.exp(m)

    def derived(self, theta):
        mu, sd = self._split(theta)
        out = {}
        for j, n in enumerate(self.names):
            out[f"mean_{n}"] = float(mu[j])
            out[f"std_{n}"] = float(sd[j])
        return out

    def step_hint(self, theta):
        return 0.5 * self._split(theta)[1]


def _beta_latent(a, b, y):
    """Normal scores of Beta(a, b) CDF values using one incomplete-beta call per entry."""
    # evaluate the smaller tail directly: I_y(a, b) = 1 - I_{1-y}(b, a)
    upper = y > a / (a + b)
    t = special.betainc(np.where(upper, b, a), np.where(upper, a, b), np.where(upper, 1.0 - y, y))
    return latent_normal(np.where(upper, 1.0 - t, t), np.where(upper, t, 1.0 - t))


class BetaCopulaPrior:
    """Beta marginals scaled to ``supports``, optionally coupled by a Gaussian copula.

    Hyperparameter layout: ``(alpha_1, beta_1, ..., alpha_k, beta_k[, rho])``;
    the copula (and ``rho``) requires exactly two parameters.
    """

    def __init__(self, supports, copula: bool = True, names: Sequence[str] | None = None):
        self.supports = np.asarray(supports, dtype=float)
        self.n_x = self.supports.shape[0]
        if copula and self.n_x != 2:
            raise ValueError("the Gaussian copula couples exactly two parameters")
        self.copula = copula
        self.n_theta = 2 * self.n_x + int(copula)
        self.names = list(names or [f"x{j + 1}" for j in range(self.n_x)])
        self.theta_names = [f"{k}_{n}" for n in self.names for k in ("alpha", "beta")]
        if copula:
            self.theta_names.append("rho")
        self.lo = self.supports[:, 0]
        self.width = self.supports[:, 1] - self.supports[:, 0]

    def _ab(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[0 : 2 * self.n_x : 2], theta[1 : 2 * self.n_x : 2]

    def log_density(self, X, theta):
        X = np.atleast_2d(X)
        a, b = self._ab(theta)
        if np.any(a <= 0) or np.any(b <= 0):
            return np.full(X.shape[0], -np.inf)
        Y = (X - self.lo) / self.width
        inside = np.all((Y > 0) & (Y < 1), axis=1)
        Yc = np.where((Y > 0) & (Y < 1), Y, 0.5)
        lp = ((a - 1) * np.log(Yc) + (b - 1) * np.log1p(-Yc)
              - special.betaln(a, b) - np.log(self.width)).sum(axis=1)
        if self.copula:
            rho = float(theta[-1])
            if not -1.0 < rho < 1.0:
                return np.full(X.shape[0], -np.inf)
            if rho != 0.0:
                z = _beta_latent(a, b, Yc)
                lp = lp + gaussian_copula_logdensity_latent(z[:, 0], z[:, 1], rho)
        return np.where(inside, lp, -np.inf)

    def marginal(self, j, theta) -> DistributionSpec:
        a, b = self._ab(theta)
        return DistributionSpec.beta(a[j], b[j], *self.supports[j])

    def marginal_pdf(self, j, grid, theta):
        return self.marginal(j, theta).pdf(grid)

    def sample(self, theta, rng, n):
        if self.copula:
            cop = GaussianCopula(float(theta[-1]), self.marginal(0, theta), self.marginal(1, theta))
            return cop.sample(rng, n)
        return np.stack([self.marginal(j, theta).sample(rng, n) for j in range(self.n_x)], axis=1)

    def median(self, theta):
        return np.array([self.marginal(j, theta).median() for j in range(self.n_x)])

    def derived(self, theta):
        out = {}
        for j, n in enumerate(self.names):
            m = self.marginal(j, theta)
            out[f"mean_{n}"] = m.mean
            out[f"std_{n}"] = m.std
        if self.copula:
            out["rho"] = float(theta[-1])
        return out

    def step_hint(self, theta):
        return 0.1 * self.width


# ---------------------------------------------------------------------------
# model definition
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    """One experiment type: a set of specimens observing selected model outputs."""

    name: str
    data: ObservationEnsemble
    outputs: tuple[int, ...]
    sigma: float

    def __post_init__(self):
        self.outputs = tuple(int(o) for o in self.outputs)
        if self.sigma <= 0:
            raise ValueError(f"{self.name}: noise sigma must be positive")
        if self.data.n_z != len(self.outputs):
            raise ValueError(f"{self.name}: data rows must match the observed outputs")


class SpecimenCoordinates(Protocol):
    """Bijective per-specimen change of sampling coordinates ``w <-> x``."""

    def to_sampling(self, X: np.ndarray, rows: np.ndarray) -> np.ndarray: ...
    def to_physical(self, W: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...
    def base_steps(self, n_x: int) -> np.ndarray: ...


@dataclass
class HierModel:
    forward: Callable
    prior: StructuralPrior
    hyper_lower: np.ndarray
    hyper_upper: np.ndarray
    experiments: list[Experiment]
    coords: SpecimenCoordinates | None = None

    def __post_init__(self):
        self.hyper_lower = np.asarray(self.hyper_lower, dtype=float)
        self.hyper_upper = np.asarray(self.hyper_upper, dtype=float)
        if self.hyper_lower.shape != (self.prior.n_theta,) or self.hyper_upper.shape != (self.prior.n_theta,):
            raise ValueError("hyperprior box must match the number of hyperparameters")
        if not (np.all(np.isfinite(self.hyper_lower)) and np.all(np.isfinite(self.hyper_upper))):
            raise ValueError("hyperprior bounds must be finite")
        if np.any(self.hyper_upper <= self.hyper_lower):
            raise ValueError("hyperprior boxes need a < b")
        self._row_exp = np.concatenate(
            [np.full(e.data.n, k) for k, e in enumerate(self.experiments)]
        ).astype(int) if self.experiments else np.zeros(0, int)
        self._offset = np.cumsum([0] + [e.data.n for e in self.experiments])

    @property
    def n(self) -> int:
        return int(self._offset[-1])

    @property
    def n_x(self) -> int:
        return self.prior.n_x

    @property
    def n_theta(self) -> int:
        return self.prior.n_theta

    @property
    def dim(self) -> int:
        return self.n * self.n_x + self.n_theta

    def dimension_report(self) -> dict:
        return {"specimens": self.n, "parameters": self.n * self.n_x,
                "hyperparameters": self.n_theta, "total": self.dim}

    def log_hyperprior(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= self.hyper_lower) or np.any(theta >= self.hyper_upper):
            return -math.inf
        return -float(np.sum(np.log(self.hyper_upper - self.hyper_lower)))

    def specimen_log_prior(self, X, theta) -> np.ndarray:
        return np.asarray(self.prior.log_density(np.atleast_2d(X), theta), dtype=float)

    def specimen_log_likelihood(self, X, rows=None) -> np.ndarray:
        """Gaussian log-likelihood of each specimen's observations at ``X[k]`` (specimen ``rows[k]``)."""
        X = np.atleast_2d(X)
        rows = np.arange(self.n) if rows is None else np.asarray(rows)
        out = np.zeros(X.shape[0])
        if X.shape[0] == 0:
            return out
        Y = np.atleast_2d(self.forward(X))
        exp_of = self._row_exp[rows]
        for k, e in enumerate(self.experiments):
            sel = exp_of == k
            if not sel.any() or not e.outputs:
                continue
            z = e.data.data[:, rows[sel] - self._offset[k]].T
            r = (z - Y[sel][:, list(e.outputs)]) / e.sigma
            out[sel] = -0.5 * np.sum(r * r, axis=1) - len(e.outputs) * (math.log(e.sigma) + 0.5 * LOG_2PI)
        return out

    def experiment_rows(self, name: str) -> np.ndarray:
        for k, e in enumerate(self.experiments):
            if e.name == name:
                return np.arange(self._offset[k], self._offset[k + 1])
        raise KeyError(name)


@dataclass
class HierState:
    X: np.ndarray  # n x n_x
    theta: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.X, dtype=float).ravel(), np.asarray(self.theta, dtype=float)])

    @classmethod
    def unflatten(cls, vec, model: HierModel) -> "HierState":
        vec = np.asarray(vec, dtype=float)
        k = model.n * model.n_x
        return cls(vec[:k].reshape(model.n, model.n_x).copy(), vec[k:].copy())


def _nan_guard(v, what):
    if np.any(np.isnan(v)):
        raise TargetError(f"{what} evaluated to NaN")
    return v


def log_joint_prior(state: HierState, model: HierModel) -> float:
    lh = model.log_hyperprior(state.theta)
    if lh == -math.inf:
        return -math.inf
    lp = _nan_guard(model.specimen_log_prior(state.X, state.theta), "structural prior")
    return float(lp.sum() + lh)


def log_likelihood(state: HierState, model: HierModel) -> float:
    return float(_nan_guard(model.specimen_log_likelihood(state.X), "likelihood").sum())


def log_posterior(state: HierState, model: HierModel) -> float:
    lp = log_joint_prior(state, model)
    if lp == -math.inf:
        return -math.inf
    return lp + log_likelihood(state, model)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

@dataclass
class HierMCMCConfig:
    n_steps: int = 50000  # sweeps
    burn_in_fraction: float = 0.2
    band: tuple[float, float] = (0.20, 0.50)
    pilot_window: int = 1000
    max_tune_rounds: int = 50
    factor: float = 1.5
    hyper_substeps: int = 5
    shape_rounds: int = 3


@dataclass
class PosteriorSummary:
    map_state: HierState
    map_log_posterior: float
    hyper_names: list[str]
    hyper_mean: np.ndarray
    hyper_std: np.ndarray
    hyper_map: np.ndarray
    derived_mean: dict
    derived_std: dict
    derived_map: dict
    dimensions: dict
    acceptance_rate: float
    coverage: float = 0.90

    def to_dict(self) -> dict:
        return {
            "dimensions": self.dimensions,
            "acceptance_rate": self.acceptance_rate,
            "map_log_posterior": self.map_log_posterior,
            "hyperparameters": {
                n: {"mean": float(m), "std": float(s), "map": float(p)}
                for n, m, s, p in zip(self.hyper_names, self.hyper_mean, self.hyper_std, self.hyper_map)
            },
            "derived": {
                k: {"mean": self.derived_mean[k], "std": self.derived_std[k], "map": self.derived_map[k]}
                for k in self.derived_mean
            },
            "envelope_coverage": self.coverage,
        }


@dataclass
class HierResult:
    chain: Chain
    summary: PosteriorSummary
    model: HierModel
    tuning_trace: list = field(default_factory=list)

    def theta_samples(self) -> np.ndarray:
        return self.chain.samples[:, -self.model.n_theta :]


class _Sweeper:
    """Mutable sampler state with per-row cached log-density terms."""

    def __init__(self, model: HierModel, state: HierState):
        self.m = model
        self.rows = np.arange(model.n)
        self.theta = np.asarray(state.theta, dtype=float).copy()
        X = np.asarray(state.X, dtype=float).copy()
        if model.coords is not None:
            self.W = model.coords.to_sampling(X, self.rows)
            X, self.lj = model.coords.to_physical(self.W, self.rows)
        else:
            self.W = X
            self.lj = np.zeros(model.n)
        self.X = X
        self.lp = model.specimen_log_prior(X, self.theta)
        self.ll = model.specimen_log_likelihood(X)
        self.lh = model.log_hyperprior(self.theta)
        tot = self.lp + self.ll + self.lj
        if self.lh == -math.inf or not np.all(np.isfinite(tot)):
            raise InitializationError("initial hierarchical state has zero posterior density")

    def physical(self, W):
        if self.m.coords is None:
            return W, np.zeros(W.shape[0])
        return self.m.coords.to_physical(W, self.rows)

    def rows_target(self, Wc):
        Xc, ljc = self.physical(Wc)
        lpc = self.m.specimen_log_prior(Xc, self.theta)
        ok = np.isfinite(lpc) & np.isfinite(ljc)
        llc = np.full(Wc.shape[0], -np.inf)
        if ok.any():
            llc[ok] = self.m.specimen_log_likelihood(Xc[ok], self.rows[ok])
        with np.errstate(invalid="ignore"):
            total = np.where(ok, lpc + llc + ljc, -np.inf)
        return total, (Xc, lpc, llc, ljc)

    def specimen_move(self, steps, rng):
        cur = self.lp + self.ll + self.lj
        self.W, _, acc, (Xc, lpc, llc, ljc) = batch_metropolis(self.W, cur, self.rows_target, steps, rng)
        self.X = np.where(acc[:, None], Xc, self.X)
        self.lp = np.where(acc, lpc, self.lp)
        self.ll = np.where(acc, llc, self.ll)
        self.lj = np.where(acc, ljc, self.lj)
        return acc

    def hyper_move(self, steps, rng) -> bool:
        cand = self.theta + steps * rng.gen.standard_normal(self.theta.shape)
        u = rng.gen.random()
        lh = self.m.log_hyperprior(cand)
        if lh == -math.inf:
            return False
        lpc = _nan_guard(self.m.specimen_log_prior(self.X, cand), "structural prior")
        new = lpc.sum() + lh
        if new == -math.inf:
            return False
        old = self.lp.sum() + self.lh
        if (math.log(u) if u > 0 else -math.inf) < new - old:
            self.theta, self.lp, self.lh = cand, lpc, lh
            return True
        return False

    def log_posterior(self) -> float:
        return float(self.lp.sum() + self.ll.sum() + self.lh)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.X.ravel(), self.theta])


def default_initial_state(model: HierModel) -> HierState:
    theta0 = 0.5 * (model.hyper_lower + model.hyper_upper)
    X0 = np.tile(model.prior.median(theta0), (model.n, 1))
    return HierState(X0, theta0)


def _in_band(rate, band):
    return (rate >= band[0]) & (rate <= band[1])


def run_hier_inference(model: HierModel, config: HierMCMCConfig, rng: RandomSource,
                       init: HierState | None = None, coverage: float = 0.90) -> HierResult:
    """Tune per-block random-walk steps on pilot sweeps, then run a production chain.

    The stored chain holds the physical state ``(x_1..x_n, theta)`` flattened
    row-major and its unnormalized log posterior.
    """
    state = init or default_initial_state(model)
    sw = _Sweeper(model, state)
    n, d = model.n, model.n_x
    band = config.band
    base = (np.tile(model.coords.base_steps(d), (n, 1)) if model.coords is not None
            else np.tile(model.prior.step_hint(state.theta), (n, 1)))
    row_scale = np.ones(n)
    hyper_base = 0.02 * (model.hyper_upper - model.hyper_lower)
    hyper_scale = 1.0
    trace = []
    tuned = False
    for rnd in range(config.max_tune_rounds):
        W_hist = np.empty((config.pilot_window, n, d))
        T_hist = np.empty((config.pilot_window, model.n_theta))
        acc_rows = np.zeros(n)
        acc_hyper = 0
        steps = base * row_scale[:, None]
        hsteps = hyper_base * hyper_scale
        for t in range(config.pilot_window):
            acc_rows += sw.specimen_move(steps, rng)
            for _ in range(config.hyper_substeps):
                acc_hyper += sw.hyper_move(hsteps, rng)
            W_hist[t] = sw.W
            T_hist[t] = sw.theta
        rate_rows = acc_rows / config.pilot_window
        rate_hyper = acc_hyper / (config.pilot_window * config.hyper_substeps)
        ok_rows = _in_band(rate_rows, band)
        ok_hyper = bool(_in_band(rate_hyper, band))
        trace.append({
            "round": rnd,
            "rows_in_band": int(ok_rows.sum()),
            "row_acceptance_min": float(rate_rows.min()),
            "row_acceptance_max": float(rate_rows.max()),
            "hyper_acceptance": float(rate_hyper),
        })
        logger.info("hier tuning round %d: %d/%d rows in band, hyper acceptance %.3f",
                    rnd, ok_rows.sum(), n, rate_hyper)
        if rnd < config.shape_rounds:
            # re-shape steps from the pilot spread; scale restarts at 1
            sd = W_hist.std(axis=0)
            moved = np.all(sd > 0, axis=1)
            base[moved] = 2.38 / math.sqrt(d) * sd[moved]
            row_scale[moved] = 1.0
            hsd = T_hist.std(axis=0)
            # a stuck or transient hyper pilot gives a misleading spread
            if rnd > 0 and rate_hyper > 0.05 and np.all(hsd > 0):
                hyper_base = 2.38 / math.sqrt(model.n_theta) * hsd
                hyper_scale = 1.0
            continue
        if ok_rows.all() and ok_hyper:
            tuned = True
            break
        row_scale = np.where(rate_rows < band[0], row_scale / config.factor,
                             np.where(rate_rows > band[1], row_scale * config.factor, row_scale))
        if not ok_hyper:
            hyper_scale = hyper_scale / config.factor if rate_hyper < band[0] else hyper_scale * config.factor
    if not tuned:
        raise TuningError(f"acceptance band {band} not reached in {config.max_tune_rounds} pilot rounds", trace)

    steps = base * row_scale[:, None]
    hsteps = hyper_base * hyper_scale
    N = config.n_steps
    states = np.empty((N, model.dim))
    lps = np.empty(N)
    accs = np.empty(N)
    denom = n + config.hyper_substeps
    for t in range(N):
        a = sw.specimen_move(steps, rng).sum()
        for _ in range(config.hyper_substeps):
            a += sw.hyper_move(hsteps, rng)
        states[t] = sw.flat()
        lps[t] = sw.log_posterior()
        accs[t] = a / denom
    burn = min(int(config.burn_in_fraction * N), N - 1)
    chain = Chain(states, lps, accs, burn, meta={
        "sweeps": N,
        "tuning_rounds": len(trace),
        "specimen_step_scale_mean": float(steps.mean()),
        "hyper_steps": hsteps.tolist(),
    })
    summary = summarize(chain, model, coverage)
    return HierResult(chain, summary, model, trace)


def map_estimate(chain: Chain) -> tuple[np.ndarray, float]:
    """Retained (post burn-in) state with the largest stored log posterior."""
    lp = chain.post_log_densities
    k = int(np.argmax(lp))
    return chain.samples[k].copy(), float(lp[k])


def summarize(chain: Chain, model: HierModel, coverage: float = 0.90) -> PosteriorSummary:
    vec, lp = map_estimate(chain)
    map_state = HierState.unflatten(vec, model)
    T = chain.samples[:, -model.n_theta :]
    der = [model.prior.derived(t) for t in T]
    keys = list(der[0])
    dmean = {k: float(np.mean([d[k] for d in der])) for k in keys}
    dstd = {k: float(np.std([d[k] for d in der], ddof=1)) if len(der) > 1 else 0.0 for k in keys}
    return PosteriorSummary(
        map_state, lp, list(model.prior.theta_names), T.mean(axis=0),
        T.std(axis=0, ddof=1) if T.shape[0] > 1 else np.zeros(model.n_theta),
        map_state.theta, dmean, dstd, model.prior.derived(map_state.theta),
        model.dimension_report(), chain.acceptance_rate, coverage,
    )


def predictive_ensemble(model: HierModel, theta, n_sim: int, rng: RandomSource,
                        pairs: Sequence[tuple[int, int]] = (), forward: Callable | None = None):
    """Draw ``x ~ p(x | theta)``, evaluate the forward map, report moments.

    ``forward`` replaces the model's map, e.g. the full model instead of a
    surrogate; draws outside a ForwardModel's box are redrawn. Returns
    ``(ensemble, report)``; the ensemble holds noise-free responses with the
    drawn inputs as provenance.
    """
    X = model.prior.sample(np.asarray(theta, dtype=float), rng, n_sim)
    fwd = model.forward if forward is None else forward
    if isinstance(fwd, ForwardModel):
        for _ in range(1000):
            bad = ~fwd.in_box(X)
            if not bad.any():
                break
            X[bad] = model.prior.sample(np.asarray(theta, dtype=float), rng, int(bad.sum()))
    Y = np.atleast_2d(fwd(X))
    ens = ObservationEnsemble(Y.T, provenance=X.T)
    report = {
        "mean": Y.mean(axis=0).tolist(),
        "std": Y.std(axis=0, ddof=1).tolist() if n_sim > 1 else [0.0] * Y.shape[1],
        "corr": {f"{a},{b}": float(np.corrcoef(Y[:, a], Y[:, b])[0, 1]) for a, b in pairs},
    }
    return ens, report


def envelope_pdfs(chain: Chain, model: HierModel, grids: Sequence[np.ndarray],
                  coverage: float = 0.90, max_samples: int = 1000) -> list[dict]:
    """Pointwise central band of structural-prior PDFs over posterior hyperparameter samples.

    For each parameter returns the grid, lower/upper band, pointwise median
    and the PDF at the MAP hyperparameters.
    """
    if not 0.0 <= coverage < 1.0:
        raise ValueError("coverage must lie in [0, 1)")
    T = chain.samples[:, -model.n_theta :]
    if T.shape[0] > max_samples:
        T = T[np.linspace(0, T.shape[0] - 1, max_samples).astype(int)]
    vec, _ = map_estimate(chain)
    theta_map = vec[-model.n_theta :]
    q = [0.5 - coverage / 2.0, 0.5, 0.5 + coverage / 2.0]
    out = []
    for j, grid in enumerate(grids):
        grid = np.asarray(grid, dtype=float)
        P = np.stack([model.prior.marginal_pdf(j, grid, t) for t in T])
        lo, med, hi = np.quantile(P, q, axis=0)
        out.append({"grid": grid, "lower": lo, "median": med, "upper": hi,
                    "map": model.prior.marginal_pdf(j, grid, theta_map)})
    return out


# ---------------------------------------------------------------------------
# damage case
# ---------------------------------------------------------------------------

class CyclicResidualCoordinates:
    """Sample cyclic-test specimens in ``(S, r)`` with ``r = (N_f(S, s) - N_obs) / sigma``.

    The likelihood of a cyclic specimen is a thin curved ridge in ``(S, s)``;
    in these coordinates it is axis-aligned. Other rows keep ``(S, s)``.
    """

    def __init__(self, rows, observed, sigma: float, delta_eps: float = DAMAGE_STRAIN_RANGE,
                 n_rows: int | None = None):
        n_rows = n_rows if n_rows is not None else int(np.max(rows)) + 1
        self.mask = np.zeros(n_rows, bool)
        self.mask[np.asarray(rows)] = True
        self.obs = np.zeros(n_rows)
        self.obs[np.asarray(rows)] = np.asarray(observed, dtype=float)
        self.sigma = float(sigma)
        self.log_de = math.log(delta_eps)
        self.delta_eps = delta_eps

    def to_sampling(self, X, rows):
        W = np.array(X, dtype=float)
        m = self.mask[rows]
        N = landgraf_morrow(X[m, 0], X[m, 1], self.delta_eps)
        W[m, 1] = (N - self.obs[rows][m]) / self.sigma
        return W

    def to_physical(self, W, rows):
        X = np.array(W, dtype=float)
        lj = np.zeros(W.shape[0])
        m = self.mask[rows]
        if m.any():
            S = W[m, 0]
            N = self.obs[rows][m] + self.sigma * W[m, 1]
            ok = (N > 0) & (S > self.delta_eps)
            with np.errstate(divide="ignore", invalid="ignore"):
                L = np.log(np.where(ok, S, 1.0)) - self.log_de
                lnN = np.log(np.where(ok, N, 1.0))
                s = np.where(ok, lnN / L, -np.inf)
                jac = np.where(ok, math.log(self.sigma) - lnN - np.log(L), -np.inf)
            X[m, 1] = s
            lj[m] = jac
        return X, lj

    def base_steps(self, n_x):
        return np.array([0.05, 1.0])


def damage_hier_model(tensile: ObservationEnsemble, cyclic: ObservationEnsemble,
                      sigma_tensile: float = 0.1, sigma_cyclic: float = 0.8,
                      delta_eps: float = DAMAGE_STRAIN_RANGE,
                      shape_box=(0.1, 15.0), copula: bool = True,
                      residual_coordinates: bool = True) -> HierModel:
    prior = BetaCopulaPrior(DAMAGE_BOX, copula=copula, names=("S", "s"))
    lower = [shape_box[0]] * 4 + ([-1.0] if copula else [])
    upper = [shape_box[1]] * 4 + ([1.0] if copula else [])
    exps = [Experiment("tensile", tensile, (0,), sigma_tensile),
            Experiment("cyclic", cyclic, (1,), sigma_cyclic)]
    coords = None
    if residual_coordinates:
        rows = np.arange(tensile.n, tensile.n + cyclic.n)
        coords = CyclicResidualCoordinates(rows, cyclic.data[0], sigma_cyclic, delta_eps,
                                           n_rows=tensile.n + cyclic.n)
    return HierModel(damage_model(delta_eps), prior, lower, upper, exps, coords)


def damage_initial_state(model: HierModel) -> HierState:
    """Prior medians at the hyperprior box center, with each cyclic specimen
    moved onto its observed ``N_f`` curve (closest feasible S to the median)."""
    state = default_initial_state(model)
    X = state.X
    (S_lo, S_hi), (s_lo, s_hi) = DAMAGE_BOX
    de = model.coords.delta_eps if isinstance(model.coords, CyclicResidualCoordinates) else DAMAGE_STRAIN_RANGE
    S_grid = np.linspace(S_lo, S_hi, 2001)[1:-1]
    margin = 0.02 * (s_hi - s_lo)
    rows = model.experiment_rows("cyclic")
    obs = model.experiments[[e.name for e in model.experiments].index("cyclic")].data.data[0]
    for r, N in zip(rows, obs):
        s_grid = math.log(max(N, 1.0 + 1e-9)) / np.log(S_grid / de)
        feas = (s_grid > s_lo + margin) & (s_grid < s_hi - margin)
        if not feas.any():
            continue
        k = np.argmin(np.where(feas, np.abs(S_grid - X[r, 0]), np.inf))
        X[r] = (S_grid[k], s_grid[k])
    return HierState(X, state.theta)
