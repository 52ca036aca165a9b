"""Hermite polynomial chaos surrogates fitted by least-squares regression."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .distributions import DistributionSpec, RandomSource, lhs_sample

logger = logging.getLogger(__name__)


class IllConditionedError(RuntimeError):
    """Regression design matrix is rank deficient or too small for the basis."""


@dataclass(frozen=True)
class MultiIndexSet:
    """Total-degree multi-indices in graded lexicographic order."""

    dim: int
    degree: int
    indices: np.ndarray = field(repr=False)

    @classmethod
    def total_degree(cls, dim: int, degree: int) -> "MultiIndexSet":
        if dim < 1 or degree < 0:
            raise ValueError("need dim >= 1 and degree >= 0")
        idx = []
        for d in range(degree + 1):
            block = []
            # stars and bars over dim slots
            for bars in itertools.combinations(range(d + dim - 1), dim - 1):
                cuts = (-1,) + bars + (d + dim - 1,)
                block.append(tuple(cuts[k + 1] - cuts[k] - 1 for k in range(dim)))
            block.sort(reverse=True)
            idx.extend(block)
        return cls(dim, degree, np.asarray(idx, dtype=np.int64).reshape(-1, dim))

    def __len__(self) -> int:
        return self.indices.shape[0]

    @staticmethod
    def expected_size(dim: int, degree: int) -> int:
        return math.comb(dim + degree, degree)


def hermite_eval(k: int, xi):
    """Probabilists' Hermite polynomial He_k and its derivative k He_{k-1}."""
    if k < 0:
        raise ValueError("degree must be >= 0")
    vals, ders = hermite_table(k, xi)
    return vals[k], ders[k]


def hermite_table(p: int, xi):
    """Values and derivatives of He_0..He_p at ``xi``; arrays of shape ``(p+1, *xi.shape)``."""
    xi = np.asarray(xi, dtype=float)
    vals = np.empty((p + 1,) + xi.shape)
    vals[0] = 1.0
    if p >= 1:
        vals[1] = xi
    for k in range(1, p):
        vals[k + 1] = xi * vals[k] - k * vals[k - 1]
    ders = np.zeros_like(vals)
    for k in range(1, p + 1):
        ders[k] = k * vals[k - 1]
    return vals, ders


@dataclass
class PCESurrogate:
    """Polynomial chaos expansion ``y = sum_a c_a prod_j He_{a_j}((x_j - shift_j) / scale_j)``."""

    indices: MultiIndexSet
    coeffs: np.ndarray  # basis size x n_z
    shift: np.ndarray
    scale: np.ndarray
    train_rmse: float | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim == 1:
            self.coeffs = self.coeffs[:, None]
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.coeffs.shape[0] != len(self.indices):
            raise ValueError("coefficient rows must match the basis size")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite surrogate coefficients")
        if self.shift.shape != (self.indices.dim,) or self.scale.shape != (self.indices.dim,):
            raise ValueError("standardization must match the input dimension")
        if np.any(self.scale <= 0):
            raise ValueError("standardization scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.indices.dim

    @property
    def output_dim(self) -> int:
        return self.coeffs.shape[1]

    def standardize(self, X):
        return (np.atleast_2d(X) - self.shift) / self.scale

    def __call__(self, x):
        return evaluate(self, x)

    def jacobian(self, x):
        return jacobian(self, x)

    # persistence --------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps({
            "dim": self.indices.dim,
            "degree": self.indices.degree,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "indices": self.indices.indices.tolist(),
            "n_outputs": self.output_dim,
            "coeffs": self.coeffs.ravel().tolist(),  # row-major
            "train_rmse": self.train_rmse,
        })

    @classmethod
    def from_json(cls, text: str) -> "PCESurrogate":
        d = json.loads(text)
        mis = MultiIndexSet.total_degree(int(d["dim"]), int(d["degree"]))
        stored = np.asarray(d["indices"], dtype=np.int64).reshape(-1, mis.dim)
        if not np.array_equal(stored, mis.indices):
            raise ValueError("stored multi-indices do not match the total-degree set")
        coeffs = np.asarray(d["coeffs"], dtype=float).reshape(len(mis), int(d["n_outputs"]))
        return cls(mis, coeffs, d["shift"], d["scale"], d.get("train_rmse"))


def basis_matrix(indices: MultiIndexSet, Xi: np.ndarray, chunk: int = 2000) -> np.ndarray:
    """Rows ``Psi[i, a] = prod_j He_{a_j}(Xi[i, j])``."""
    Xi = np.atleast_2d(Xi)
    m = len(indices)
    out = np.empty((Xi.shape[0], m))
    for start in range(0, Xi.shape[0], chunk):
        sl = slice(start, start + chunk)
        H, _ = hermite_table(indices.degree, Xi[sl].T)  # (p+1, dim, rows)
        block = np.ones((Xi[sl].shape[0], m))
        for j in range(indices.dim):
            block *= H[indices.indices[:, j], j, :].T
        out[sl] = block
    return out


def evaluate(surrogate: PCESurrogate, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    Psi = basis_matrix(surrogate.indices, surrogate.standardize(x))
    y = Psi @ surrogate.coeffs
    return y[0] if x.ndim == 1 else y


def jacobian(surrogate: PCESurrogate, x) -> np.ndarray:
    """Analytic ``dy/dx``: ``(n_z, n_x)`` for one point, ``(m, n_z, n_x)`` for a batch."""
    x = np.asarray(x, dtype=float)
    Xi = surrogate.standardize(x)
    idx = surrogate.indices.indices
    H, D = hermite_table(surrogate.indices.degree, Xi.T)  # (p+1, dim, m)
    vals = np.stack([H[idx[:, j], j, :] for j in range(idx.shape[1])])  # dim, basis, m
    ders = np.stack([D[idx[:, j], j, :] for j in range(idx.shape[1])])
    m_pts = Xi.shape[0]
    J = np.empty((m_pts, surrogate.output_dim, surrogate.input_dim))
    for j in range(surrogate.input_dim):
        prod = ders[j].copy()
        for k in range(surrogate.input_dim):
            if k != j:
                prod *= vals[k]
        J[:, :, j] = (prod.T @ surrogate.coeffs) / surrogate.scale[j]
    return J[0] if x.ndim == 1 else J


def _standardization(dists: Sequence[DistributionSpec]):
    return (np.array([d.mean for d in dists]), np.array([d.std for d in dists]))


def solve_regression(Psi: np.ndarray, Y: np.ndarray, degree: int) -> np.ndarray:
    """Least squares via economic QR; raises when the design is rank deficient."""
    n, m = Psi.shape
    if n < m:
        raise IllConditionedError(
            f"degree {degree}: {n} samples for {m} basis terms; need at least {m}"
        )
    Q, R = linalg.qr(Psi, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * diag.max():
        raise IllConditionedError(
            f"degree {degree}: design matrix rank deficient with {n} samples "
            f"and {m} basis terms (min/max |R_ii| = {diag.min() / diag.max():.2e})"
        )
    return linalg.solve_triangular(R, Q.T @ Y)


def fit_from_samples(X, Y, degree: int, shift, scale) -> PCESurrogate:
    X = np.atleast_2d(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    mis = MultiIndexSet.total_degree(X.shape[1], degree)
    Psi = basis_matrix(mis, (X - shift) / scale)
    coeffs = solve_regression(Psi, Y, degree)
    rmse = float(np.sqrt(np.mean((Psi @ coeffs - Y) ** 2)))
    return PCESurrogate(mis, coeffs, shift, scale, rmse)


def fit_regression(
    model: Callable,
    dists: Sequence[DistributionSpec],
    degree: int,
    n_train: int,
    rng: RandomSource,
    shift=None,
    scale=None,
) -> PCESurrogate:
    """Fit on an LHS design drawn from ``dists``.

    The germ is the affine standardization ``(x - mean) / std`` of each input
    law unless ``shift``/``scale`` are given.
    """
    size = MultiIndexSet.expected_size(len(dists), degree)
    if n_train < size:
        raise IllConditionedError(
            f"degree {degree} needs at least {size} training samples, got {n_train}"
        )
    if n_train < 2 * size:
        logger.warning("n_train=%d is below twice the basis size %d", n_train, size)
    X = lhs_sample(dists, rng, n_train)
    Y = np.asarray(model(X), dtype=float)
    mu, sd = _standardization(dists)
    shift = mu if shift is None else np.asarray(shift, dtype=float)
    scale = sd if scale is None else np.asarray(scale, dtype=float)
    sur = fit_from_samples(X, Y, degree, shift, scale)
    logger.info("PCE degree %d fitted on %d samples, training RMSE %.3e", degree, n_train, sur.train_rmse)
    return sur


@dataclass
class CVResult:
    selected: int
    degrees: list[int]
    basis_sizes: list[int]
    rmse: list[float]  # mean k-fold validation RMSE, inf when infeasible
    relative_rmse: list[float]

    def rows(self):
        return [
            {"degree": d, "basis_size": b, "cv_rmse": r, "relative_cv_rmse": rr}
            for d, b, r, rr in zip(self.degrees, self.basis_sizes, self.rmse, self.relative_rmse)
        ]


def cross_validate_degree(
    model: Callable,
    dists: Sequence[DistributionSpec],
    degrees: Sequence[int],
    n_train: int,
    k_folds: int,
    rng: RandomSource,
    tie_tolerance: float = 0.01,
    noise_floor: float = 1e-10,
) -> CVResult:
    """k-fold cross-validation over candidate total degrees on one LHS design.

    Scores below ``noise_floor`` times the output spread count as equal; the
    lowest degree within ``tie_tolerance`` of the best score wins.
    """
    if k_folds < 2 or k_folds > n_train:
        raise ValueError("need 2 <= k_folds <= n_train")
    X = lhs_sample(dists, rng, n_train)
    Y = np.asarray(model(X), dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    folds = np.array_split(rng.gen.permutation(n_train), k_folds)
    shift, scale = _standardization(dists)
    spread = float(np.sqrt(np.mean((Y - Y.mean(axis=0)) ** 2))) or 1.0
    degrees = sorted(int(d) for d in degrees)
    sizes, scores = [], []
    for p in degrees:
        mis = MultiIndexSet.total_degree(X.shape[1], p)
        sizes.append(len(mis))
        Psi = basis_matrix(mis, (X - shift) / scale)
        sq = 0.0
        try:
            for f in folds:
                mask = np.ones(n_train, bool)
                mask[f] = False
                c = solve_regression(Psi[mask], Y[mask], p)
                sq += float(np.sum((Psi[f] @ c - Y[f]) ** 2))
            scores.append(math.sqrt(sq / Y.size))
        except IllConditionedError as exc:
            logger.warning("cross-validation skips degree %d: %s", p, exc)
            scores.append(math.inf)
    if all(math.isinf(s) for s in scores):
        raise IllConditionedError(f"every candidate degree {degrees} is ill-conditioned for n_train={n_train}")
    eff = [max(s, noise_floor * spread) for s in scores]
    best = min(eff)
    selected = next(d for d, s in zip(degrees, eff) if s <= best * (1.0 + tie_tolerance))
    return CVResult(selected, degrees, sizes, scores, [s / spread for s in scores])
