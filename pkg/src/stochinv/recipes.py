"""End-to-end experiment pipelines for the damage case and the cyclic toy case.

Every stage draws from its own derived random stream, so stages can be run
separately (e.g. ``generate`` then ``infer``) and still see identical data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hier, transform
from .config import ChainConfig, RunConfig
from .diagnostics import ComparisonTable, mae, mape, moment_table
from .distributions import DistributionSpec, RandomSource, lhs_sample
from .mcmc import effective_sample_size
from .models import (
    DAMAGE_BOX,
    TOY_PRESCRIBED_MEANS,
    TOY_PRESCRIBED_STDS,
    ObservationEnsemble,
    NoiseSpec,
    damage_model,
    generate_damage_data,
    generate_toy_data,
    toy_model,
)
from .pce import CVResult, PCESurrogate, cross_validate_degree, fit_from_samples

logger = logging.getLogger(__name__)

# stream indices below the run seed
STREAM_DATA = 0
STREAM_SURROGATE = 1
STREAM_BAYES = 2
STREAM_TRANSFORM = 3
STREAM_PREDICTIVE = 4
STREAM_DIAGNOSE = 5

# compared response components, 1-based time-step labels
TOY_RESPONSE_PAIR = (200, 220)
TOY_ACTIVE = np.arange(5)


class DataError(ValueError):
    """Input data missing, empty or inconsistent with the configuration."""


def streams(cfg: RunConfig) -> RandomSource:
    return RandomSource(cfg.seed)


def hier_config(c: ChainConfig) -> hier.HierMCMCConfig:
    return hier.HierMCMCConfig(n_steps=c.steps, burn_in_fraction=c.burn_in, band=tuple(c.band),
                               pilot_window=c.window, max_tune_rounds=c.max_rounds,
                               hyper_substeps=c.hyper_substeps)


def transform_config(c: ChainConfig) -> transform.TransformMCMCConfig:
    return transform.TransformMCMCConfig(n_steps=c.steps, burn_in_fraction=c.burn_in, band=tuple(c.band),
                                         window=c.window, max_tune_rounds=c.max_rounds)


def _thin(samples: np.ndarray, n: int) -> np.ndarray:
    if samples.shape[0] <= n:
        return samples
    return samples[np.linspace(0, samples.shape[0] - 1, n).astype(int)]


def _errors(table: ComparisonTable, rows, data_mean, data_std, model_stats) -> None:
    for r in rows:
        m, s = model_stats[r]
        table.errors[(r, "MAE_MEAN")] = mae(data_mean, m)
        table.errors[(r, "MAE_STD")] = mae(data_std, s)
        table.errors[(r, "MAPE_MEAN")] = mape(data_mean, m)
        table.errors[(r, "MAPE_STD")] = mape(data_std, s)


# ---------------------------------------------------------------------------
# damage case
# ---------------------------------------------------------------------------

DAMAGE_FILES = {
    "tensile": ("tensile.csv", "tensile_provenance.csv"),
    "cyclic": ("cyclic.csv", "cyclic_provenance.csv"),
}


@dataclass
class DamageData:
    tensile: ObservationEnsemble
    cyclic: ObservationEnsemble

    @property
    def inputs(self) -> np.ndarray | None:
        if self.tensile.provenance is None or self.cyclic.provenance is None:
            return None
        return np.concatenate([self.tensile.provenance, self.cyclic.provenance], axis=1)

    def write(self, out: Path) -> list[Path]:
        files = []
        for name, ens in (("tensile", self.tensile), ("cyclic", self.cyclic)):
            d, p = DAMAGE_FILES[name]
            ens.to_csv(out / d, out / p)
            files += [out / d, out / p]
        return files


def damage_data(cfg: RunConfig) -> DamageData:
    syn = cfg.synthetic()
    if cfg.data.paths:
        paths = cfg.data.paths
        for name in ("tensile", "cyclic"):
            if name not in paths:
                raise DataError(f"data.paths.{name}: required for the damage model")
        ens = {}
        for name, sigma in (("tensile", syn.sigma_tensile), ("cyclic", syn.sigma_cyclic)):
            try:
                ens[name] = ObservationEnsemble.from_csv(paths[name], NoiseSpec(sigma),
                                                         paths.get(f"{name}_provenance"))
            except ValueError as exc:
                raise DataError(f"{paths[name]}: {exc}") from None
        return DamageData(ens["tensile"], ens["cyclic"])
    t, c = generate_damage_data(streams(cfg).derive(STREAM_DATA), syn.n_tensile, syn.n_cyclic,
                                syn.sigma_tensile, syn.sigma_cyclic, syn.alpha, syn.beta, syn.delta_eps)
    return DamageData(t, c)


def damage_bayes(cfg: RunConfig, data: DamageData) -> hier.HierResult:
    syn = cfg.synthetic()
    model = hier.damage_hier_model(data.tensile, data.cyclic, syn.sigma_tensile, syn.sigma_cyclic,
                                   syn.delta_eps)
    init = hier.damage_initial_state(model)
    return hier.run_hier_inference(model, hier_config(cfg.mcmc.bayes),
                                   streams(cfg).derive(STREAM_BAYES), init)


def damage_transform_problem(data: DamageData, n_sim: int, rng: RandomSource,
                             delta_eps: float = 0.03, threads: int = 1) -> transform.TransformProblem:
    model = damage_model(delta_eps)
    lo = [b[0] for b in DAMAGE_BOX]
    hi = [b[1] for b in DAMAGE_BOX]
    dens = transform.build_kernel_copula_density(data.tensile, data.cyclic, model, lo, hi, n_sim,
                                                 rng, threads=threads)
    return transform.TransformProblem(model, model.jacobian, dens, lo, hi, names=["S", "s"])


@dataclass
class TransformRun:
    problem: transform.TransformProblem
    results: list
    trace: list

    @property
    def final(self) -> transform.TransformResult:
        return self.results[-1]


def damage_transform(cfg: RunConfig, data: DamageData, threads: int = 1) -> TransformRun:
    syn = cfg.synthetic()
    rng = streams(cfg).derive(STREAM_TRANSFORM)
    problem = damage_transform_problem(data, cfg.transform.n_sim, rng.derive(0), syn.delta_eps, threads)
    problem, results, trace = transform.iterate_correlation(
        problem, cfg.transform.rounds, transform_config(cfg.mcmc.transform), rng.derive(1),
        cfg.transform.n_sim, threads=threads)
    return TransformRun(problem, results, trace)


def _damage_sets(X: np.ndarray, N: np.ndarray) -> dict:
    return {"S": X[:, 0], "s": X[:, 1], "N_f": N}


def damage_comparison(cfg: RunConfig, data: DamageData, bayes: hier.HierResult | None,
                      trans: TransformRun | None) -> tuple[ComparisonTable, dict]:
    """Rows Data / Bayes / Transf. with moments of S, s, N_f and two correlations.

    The Data row needs the generating inputs (provenance files).
    """
    syn = cfg.synthetic()
    model = damage_model(syn.delta_eps)
    X = data.inputs
    if X is None:
        raise DataError("the comparison table needs tensile and cyclic provenance files")
    N_obs = data.cyclic.data[0]
    sets = {"Data": {"S": X[0], "s": X[1], "N_f": N_obs,
                     ("S", "s"): (X[0], X[1]),
                     ("S", "N_f"): (data.cyclic.provenance[0], N_obs)}}
    extra = {}
    rng = streams(cfg).derive(STREAM_PREDICTIVE)
    if bayes is not None:
        theta = bayes.summary.hyper_map
        ens, report = hier.predictive_ensemble(bayes.model, theta, cfg.predictive.n_sim, rng.derive(0))
        Xb = ens.provenance.T
        sets["Bayes"] = _damage_sets(Xb, ens.data[1])
        extra["bayes_epistemic"] = damage_epistemic(cfg, bayes, rng.derive(1))
    if trans is not None:
        Xt = _thin(trans.final.chain.samples, cfg.predictive.n_sim)
        sets["Transf."] = _damage_sets(Xt, model(Xt)[:, 1])
    table = moment_table(sets, ["S", "s", "N_f"], [("S", "s"), ("S", "N_f")])
    dm = [table.mean[("Data", v)] for v in table.variables]
    ds = [table.std[("Data", v)] for v in table.variables]
    stats = {r: ([table.mean[(r, v)] for v in table.variables], [table.std[(r, v)] for v in table.variables])
             for r in table.rows if r != "Data"}
    _errors(table, list(stats), dm, ds, stats)
    return table, extra


def damage_epistemic(cfg: RunConfig, bayes: hier.HierResult, rng: RandomSource) -> dict:
    """Spread of predictive moments over posterior hyperparameter draws."""
    T = _thin(bayes.theta_samples(), cfg.predictive.epistemic_draws)
    rows = []
    for k, theta in enumerate(T):
        ens, _ = hier.predictive_ensemble(bayes.model, theta, cfg.predictive.epistemic_n_sim, rng.derive(k))
        X, N = ens.provenance, ens.data[1]
        rows.append([X[0].mean(), X[1].mean(), N.mean(), X[0].std(ddof=1), X[1].std(ddof=1), N.std(ddof=1),
                     np.corrcoef(X[0], X[1])[0, 1], np.corrcoef(X[0], N)[0, 1]])
    R = np.asarray(rows)
    keys = ["mean_S", "mean_s", "mean_N_f", "std_S", "std_s", "std_N_f", "corr_S_s", "corr_S_N_f"]
    return {"draws": int(R.shape[0]),
            "std": {k: float(v) for k, v in zip(keys, R.std(axis=0, ddof=1) if R.shape[0] > 1 else np.zeros(8))}}


# ---------------------------------------------------------------------------
# toy case
# ---------------------------------------------------------------------------

TOY_FILES = ("curves.csv", "curves_provenance.csv")
TOY_NAMES = ["x1", "x2", "x3", "x4", "x5", "x6"]


def toy_domain() -> list[DistributionSpec]:
    return [DistributionSpec.uniform(0.0, 1.0) for _ in range(6)]


def toy_forward(cfg: RunConfig):
    syn = cfg.synthetic()
    return toy_model(syn.n_t, syn.t_end)


def toy_data(cfg: RunConfig) -> ObservationEnsemble:
    syn = cfg.synthetic()
    if cfg.data.paths:
        if "curves" not in cfg.data.paths:
            raise DataError("data.paths.curves: required for the toy model")
        try:
            ens = ObservationEnsemble.from_csv(cfg.data.paths["curves"], NoiseSpec(syn.sigma),
                                               cfg.data.paths.get("curves_provenance"))
        except ValueError as exc:
            raise DataError(str(exc)) from None
        if ens.n_z != syn.n_t:
            raise DataError(f"curves have {ens.n_z} points; data.synthetic.n_t is {syn.n_t}")
        return ens
    return generate_toy_data(streams(cfg).derive(STREAM_DATA), syn.n, syn.n_t, syn.sigma, syn.t_end)


@dataclass
class SurrogateFit:
    surrogate: PCESurrogate
    cv: CVResult | None
    design: np.ndarray = field(repr=False)
    responses: np.ndarray = field(repr=False)


def toy_training_design(cfg: RunConfig) -> np.ndarray:
    """LHS design the surrogate is trained on; sensitivity reuses it."""
    rng = streams(cfg).derive(STREAM_SURROGATE).derive(1)
    return lhs_sample(toy_domain(), rng, cfg.surrogate.n_train)


def toy_surrogate(cfg: RunConfig) -> SurrogateFit:
    """Cross-validate the degree list, then fit the configured degree on an LHS design."""
    model = toy_forward(cfg)
    dom = toy_domain()
    rng = streams(cfg).derive(STREAM_SURROGATE)
    s = cfg.surrogate
    cv = None
    if s.cv_degrees:
        cv = cross_validate_degree(model, dom, s.cv_degrees, s.n_cv, s.k_folds, rng.derive(0))
        logger.info("cross-validation selects degree %d", cv.selected)
    design = toy_training_design(cfg)
    responses = model(design)
    mu = np.array([d.mean for d in dom])
    sd = np.array([d.std for d in dom])
    sur = fit_from_samples(design, responses, s.degree, mu, sd)
    return SurrogateFit(sur, cv, design, responses)


def toy_hyper_box():
    """Uniform hyperprior boxes: mean +- sqrt(3) sd of the prior rows."""
    prior_mean_mu = (0.444, 0.263, 0.397, 0.381, 0.228, 0.520)
    prior_sd_mu = (0.128, 0.182, 0.146, 0.165, 0.132, 0.300)
    prior_mean_sd = (0.102, 0.145, 0.082, 0.131, 0.076, 0.300)
    prior_sd_sd = (0.037, 0.053, 0.046, 0.048, 0.031, 0.173)
    r3 = math.sqrt(3.0)
    lo, hi = [], []
    for a, b, c, d in zip(prior_mean_mu, prior_sd_mu, prior_mean_sd, prior_sd_sd):
        lo += [a - r3 * b, c - r3 * d]
        hi += [a + r3 * b, c + r3 * d]
    return np.array(lo), np.array(hi)


def toy_hier_model(cfg: RunConfig, ens: ObservationEnsemble, surrogate) -> hier.HierModel:
    syn = cfg.synthetic()
    lo, hi = toy_hyper_box()
    prior = hier.LognormalPrior(6, TOY_NAMES)
    return hier.HierModel(surrogate, prior, lo, hi,
                          [hier.Experiment("curves", ens, tuple(range(ens.n_z)), syn.sigma)])


def toy_bayes(cfg: RunConfig, ens: ObservationEnsemble, surrogate) -> hier.HierResult:
    model = toy_hier_model(cfg, ens, surrogate)
    return hier.run_hier_inference(model, hier_config(cfg.mcmc.bayes), streams(cfg).derive(STREAM_BAYES))


def toy_transform(cfg: RunConfig, ens: ObservationEnsemble, surrogate: PCESurrogate) -> TransformRun:
    dens = transform.build_pca_data_density(ens, len(TOY_ACTIVE))
    problem = transform.pca_problem(surrogate, dens, np.zeros(6), np.ones(6), TOY_ACTIVE, TOY_NAMES)
    res = transform.sample_parameters(problem, transform_config(cfg.mcmc.transform),
                                      streams(cfg).derive(STREAM_TRANSFORM))
    return TransformRun(problem, [res], [])


def toy_comparison(cfg: RunConfig, ens: ObservationEnsemble, bayes: hier.HierResult | None,
                   trans: TransformRun | None) -> tuple[ComparisonTable, dict]:
    """Moments of two response components; MAE/MAPE over all components."""
    model = toy_forward(cfg)
    a, b = TOY_RESPONSE_PAIR
    if ens.n_z < b:
        raise DataError(f"curves have {ens.n_z} points; the comparison uses y_{a} and y_{b}")
    va, vb = f"y_{a}", f"y_{b}"

    def as_set(Y):
        return {va: Y[:, a - 1], vb: Y[:, b - 1]}

    Yd = ens.data.T
    sets = {"Data": as_set(Yd)}
    full = {}
    rng = streams(cfg).derive(STREAM_PREDICTIVE)
    if bayes is not None:
        e, _ = hier.predictive_ensemble(bayes.model, bayes.summary.hyper_map, cfg.predictive.n_sim,
                                        rng.derive(0), forward=model)
        sets["Bayes"] = as_set(e.data.T)
        full["Bayes"] = e.data.T
    if trans is not None:
        Xt = _thin(trans.final.chain.samples, cfg.predictive.n_sim)
        Yt = model(Xt)
        sets["Transf."] = as_set(Yt)
        full["Transf."] = Yt
    table = moment_table(sets, [va, vb], [(va, vb)])
    dm, ds = Yd.mean(axis=0), Yd.std(axis=0, ddof=1)
    stats = {r: (Y.mean(axis=0), Y.std(axis=0, ddof=1)) for r, Y in full.items()}
    _errors(table, list(stats), dm, ds, stats)
    return table, {}


def chain_ess(samples: np.ndarray, names) -> dict:
    return {n: effective_sample_size(samples[:, j]) for j, n in enumerate(names)}


def prescribed_toy_moments() -> dict:
    return {"mean": list(TOY_PRESCRIBED_MEANS), "std": list(TOY_PRESCRIBED_STDS)}
