"""Forward maps from material parameters to observables, noise injection and
synthetic ensemble generation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .distributions import DistributionSpec, GaussianCopula, ParameterDomainError, RandomSource

logger = logging.getLogger(__name__)

DAMAGE_BOX = ((0.1, 1.2), (1.0, 2.8))
DAMAGE_STRAIN_RANGE = 0.03


class ModelDomainError(ValueError):
    """Model evaluated outside the set where it is defined."""


@dataclass(frozen=True)
class ForwardModel:
    """Deterministic map ``x -> y`` on a feasible box.

    ``evaluator`` takes an ``(m, n_x)`` array and returns ``(m, n_z)``.
    ``jacobian_fn``, when given, takes ``(m, n_x)`` and returns ``(m, n_z, n_x)``;
    otherwise central differences are used.
    """

    name: str
    input_dim: int
    output_dim: int
    lower: np.ndarray
    upper: np.ndarray
    evaluator: Callable[[np.ndarray], np.ndarray]
    jacobian_fn: Callable[[np.ndarray], np.ndarray] | None = None
    output_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != (self.input_dim,) or self.upper.shape != (self.input_dim,):
            raise ValueError("feasible box must match input_dim")
        if np.any(self.upper <= self.lower):
            raise ValueError("feasible box needs upper > lower")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.evaluator(x[None, :])[0]
        return self.evaluator(x)

    def jacobian(self, x, h: float = 1e-6):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if self.jacobian_fn is not None:
            J = self.jacobian_fn(X)
        else:
            J = np.empty((X.shape[0], self.output_dim, self.input_dim))
            for j in range(self.input_dim):
                step = h * np.maximum(1.0, np.abs(X[:, j]))
                Xp, Xm = X.copy(), X.copy()
                Xp[:, j] += step
                Xm[:, j] -= step
                J[:, :, j] = (self.evaluator(Xp) - self.evaluator(Xm)) / (2 * step)[:, None]
        return J[0] if single else J

    def in_box(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lower) & (X <= self.upper), axis=1)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian measurement error; ``sigma`` scalar or per component."""

    sigma: Union[float, tuple[float, ...]]

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ParameterDomainError(f"noise sigma must be finite and >= 0, got {self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)


@dataclass
class ObservationEnsemble:
    """Observed responses, one column per specimen (``n_z x n``)."""

    data: np.ndarray
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.0))
    provenance: np.ndarray | None = None  # n_x x n true inputs for synthetic data

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.data.shape[1] < 1:
            raise ValueError("ensemble needs at least one specimen")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ensemble contains missing or non-finite entries")
        if self.provenance is not None:
            self.provenance = np.atleast_2d(np.asarray(self.provenance, dtype=float))
            if self.provenance.shape[1] != self.data.shape[1]:
                raise ValueError("provenance must have one column per specimen")

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def n_z(self) -> int:
        return self.data.shape[0]

    def to_csv(self, path, provenance_path=None) -> None:
        write_matrix_csv(path, [f"specimen_{i + 1}" for i in range(self.n)], self.data)
        if provenance_path is not None and self.provenance is not None:
            nx = self.provenance.shape[0]
            write_matrix_csv(provenance_path, [f"x_{j + 1}" for j in range(nx)], self.provenance.T)

    @classmethod
    def from_csv(cls, path, noise: NoiseSpec | None = None, provenance_path=None):
        header, rows = read_matrix_csv(path)
        if not all(h == f"specimen_{i + 1}" for i, h in enumerate(header)):
            raise ValueError(f"{path}: header must be specimen_1,...,specimen_n")
        prov = None
        if provenance_path is not None:
            ph, prow = read_matrix_csv(provenance_path)
            if not all(h == f"x_{j + 1}" for j, h in enumerate(ph)):
                raise ValueError(f"{provenance_path}: header must be x_1,...,x_nx")
            prov = prow.T
        return cls(rows, noise or NoiseSpec(0.0), prov)


def format_float(v: float) -> str:
    return repr(float(v))


def write_matrix_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    rows = np.atleast_2d(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_float(v) for v in r])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [[float(v) for v in r] for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"{path}: ragged rows")
    return header, np.asarray(rows, dtype=float)


# ---------------------------------------------------------------------------
# damage model
# ---------------------------------------------------------------------------

def landgraf_morrow(S, s, delta_eps=DAMAGE_STRAIN_RANGE):
    """Cycles to failure ``N_f = (delta_eps / S) ** (-s)``."""
    S = np.asarray(S, dtype=float)
    delta_eps = np.asarray(delta_eps, dtype=float)
    if np.any(S <= 0) or np.any(delta_eps <= 0):
        raise ModelDomainError("Landgraf-Morrow needs S > 0 and strain range > 0")
    # exp/log form keeps log N_f = -s (log de - log S) exact
    out = np.exp(-np.asarray(s, dtype=float) * (np.log(delta_eps) - np.log(S)))
    return out if out.ndim else float(out)


def tensile_observable(S):
    """Strain at rupture of a tensile test equals the ductility coefficient."""
    return S


def damage_model(delta_eps: float = DAMAGE_STRAIN_RANGE) -> ForwardModel:
    """Stacked damage model ``(S, s) -> (strain at rupture, N_f)``."""

    def evaluate(X):
        S, s = X[:, 0], X[:, 1]
        return np.stack([tensile_observable(S), landgraf_morrow(S, s, delta_eps)], axis=1)

    def jac(X):
        S, s = X[:, 0], X[:, 1]
        N = landgraf_morrow(S, s, delta_eps)
        J = np.zeros((X.shape[0], 2, 2))
        J[:, 0, 0] = 1.0
        J[:, 1, 0] = s * N / S
        J[:, 1, 1] = N * np.log(S / delta_eps)
        return J

    lo, hi = zip(*DAMAGE_BOX)
    return ForwardModel(
        "damage", 2, 2, lo, hi, evaluate, jac,
        output_names=("strain_at_rupture", "N_f"), input_names=("S", "s"),
    )


# ---------------------------------------------------------------------------
# toy cyclic model
# ---------------------------------------------------------------------------

TOY_CYCLES = 10
TOY_ENVELOPE = 1.7


def toy_cyclic_model(x, t_grid) -> np.ndarray:
    """Smooth stand-in for a cyclic stress response.

    With ``tau`` the time rescaled to [0, 1]::

        amp(tau)   = 0.5 + 0.4 x1 + (0.3 + 0.3 x2) (1 - exp(-(2 + 10 x3) tau))
        drift(tau) = 0.1 x4 (1 - exp(-(1 + 4 x5) tau))
        phase      = 0.3 x1 - 0.2 x3 + 0.2 x5
        y(tau)     = amp(tau) sin(2 pi 10 tau + phase) + drift(tau)

    ``x6`` does not enter. ``|y| <= 1.6`` on the unit box.
    Accepts ``x`` of shape ``(6,)`` or ``(m, 6)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != 6:
        raise ModelDomainError(f"toy model takes 6 parameters, got {X.shape[1]}")
    if np.any(X < 0) or np.any(X > 1):
        raise ModelDomainError("toy model parameters must lie in the unit box")
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or t[-1] == t[0]:
        raise ModelDomainError("time grid needs at least two distinct points")
    tau = ((t - t[0]) / (t[-1] - t[0]))[None, :]
    x1, x2, x3, x4, x5 = (X[:, j : j + 1] for j in range(5))
    amp = 0.5 + 0.4 * x1 + (0.3 + 0.3 * x2) * (1.0 - np.exp(-(2.0 + 10.0 * x3) * tau))
    drift = 0.1 * x4 * (1.0 - np.exp(-(1.0 + 4.0 * x5) * tau))
    phase = 0.3 * x1 - 0.2 * x3 + 0.2 * x5
    y = amp * np.sin(2.0 * np.pi * TOY_CYCLES * tau + phase) + drift
    return y[0] if single else y


def toy_model(n_t: int = 568, t_end: float = 60.0) -> ForwardModel:
    t_grid = np.linspace(0.0, t_end, n_t)
    return ForwardModel(
        "toy", 6, n_t, np.zeros(6), np.ones(6),
        lambda X: toy_cyclic_model(X, t_grid),
        input_names=tuple(f"x{j + 1}" for j in range(6)),
    )


# ---------------------------------------------------------------------------
# noise and synthetic data
# ---------------------------------------------------------------------------

def add_noise(data, noise: NoiseSpec, rng: RandomSource):
    """Add independent N(0, sigma^2) errors; sigma broadcasts along rows (components)."""
    if isinstance(data, ObservationEnsemble):
        return ObservationEnsemble(add_noise(data.data, noise, rng), noise, data.provenance)
    arr = np.asarray(data, dtype=float)
    sigma = noise.as_array()
    if sigma.ndim == 1 and arr.ndim == 2:
        if sigma.shape[0] != arr.shape[0]:
            raise ValueError("per-component sigma must match the number of rows")
        sigma = sigma[:, None]
    return arr + sigma * rng.gen.standard_normal(arr.shape)


InputLaw = Union[DistributionSpec, GaussianCopula, float]


def draw_inputs(input_laws: Sequence[InputLaw], rng: RandomSource, n: int) -> np.ndarray:
    cols = []
    for law in input_laws:
        if isinstance(law, GaussianCopula):
            cols.extend(law.sample(rng, n).T)
        elif isinstance(law, DistributionSpec):
            cols.append(law.sample(rng, n))
        else:
            cols.append(np.full(n, float(law)))
    return np.stack(cols, axis=1)


def generate_synthetic_ensemble(
    model: ForwardModel,
    input_laws: Sequence[InputLaw],
    n: int,
    noise: NoiseSpec,
    rng: RandomSource,
    outputs: Sequence[int] | None = None,
    max_resample: int = 1000,
) -> ObservationEnsemble:
    """Draw ``n`` independent inputs, evaluate the model and add noise.

    Inputs falling outside the feasible box are redrawn (truncation).
    ``outputs`` restricts the observed response components.
    """
    X = draw_inputs(input_laws, rng, n)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"{model.name}: expected {model.input_dim} inputs, laws give {X.shape[1]}")
    for _ in range(max_resample):
        bad = ~model.in_box(X)
        if not bad.any():
            break
        logger.info("resampling %d out-of-box draws for %s", int(bad.sum()), model.name)
        X[bad] = draw_inputs(input_laws, rng, int(bad.sum()))
    else:
        raise ModelDomainError("could not draw inputs inside the feasible box")
    Y = model(X)
    if outputs is not None:
        Y = Y[:, list(outputs)]
    data = Y.T
    if np.any(noise.as_array() > 0):
        data = add_noise(data, noise, rng)
    return ObservationEnsemble(data, noise, X.T)


def damage_input_laws(alpha: float = 2.0, beta: float = 2.0) -> list[DistributionSpec]:
    return [DistributionSpec.beta(alpha, beta, *DAMAGE_BOX[0]),
            DistributionSpec.beta(alpha, beta, *DAMAGE_BOX[1])]


def generate_damage_data(
    rng: RandomSource,
    n_tensile: int = 50,
    n_cyclic: int = 30,
    sigma_tensile: float = 0.1,
    sigma_cyclic: float = 0.8,
    alpha: float = 2.0,
    beta: float = 2.0,
    delta_eps: float = DAMAGE_STRAIN_RANGE,
) -> tuple[ObservationEnsemble, ObservationEnsemble]:
    """Tensile (strain at rupture) and cyclic (N_f) ensembles on disjoint specimens."""
    model = damage_model(delta_eps)
    laws = damage_input_laws(alpha, beta)
    tensile = generate_synthetic_ensemble(model, laws, n_tensile, NoiseSpec(sigma_tensile), rng, [0])
    cyclic = generate_synthetic_ensemble(model, laws, n_cyclic, NoiseSpec(sigma_cyclic), rng, [1])
    return tensile, cyclic


# prescribed lognormal moments of the six viscoplastic parameters; the last
# one is held fixed in the synthetic ensemble
TOY_PRESCRIBED_MEANS = (0.444, 0.263, 0.386, 0.381, 0.283, 0.240)
TOY_PRESCRIBED_STDS = (0.052, 0.105, 0.048, 0.095, 0.044, 0.0)


def toy_input_laws() -> list[InputLaw]:
    laws: list[InputLaw] = []
    for m, s in zip(TOY_PRESCRIBED_MEANS, TOY_PRESCRIBED_STDS):
        laws.append(DistributionSpec.lognormal(m, s) if s > 0 else m)
    return laws


def generate_toy_data(rng: RandomSource, n: int = 16, n_t: int = 568, sigma: float = 0.01,
                      t_end: float = 60.0):
    model = toy_model(n_t, t_end)
    return generate_synthetic_ensemble(model, toy_input_laws(), n, NoiseSpec(sigma), rng)


__all__ = [
    "ForwardModel", "NoiseSpec", "ObservationEnsemble", "ModelDomainError",
    "landgraf_morrow", "tensile_observable", "damage_model", "toy_cyclic_model", "toy_model",
    "add_noise", "generate_synthetic_ensemble", "generate_damage_data", "generate_toy_data",
    "damage_input_laws", "toy_input_laws",
]
