"""Principal-component reduction of observation ensembles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .models import ObservationEnsemble

SINGULAR_DET = 1e-300


class DegenerateDataError(ValueError):
    """Ensemble (or a retained component) has no variance."""


class DimensionError(ValueError):
    pass


@dataclass
class PCABasis:
    mean: np.ndarray  # n_z
    components: np.ndarray  # n_z x r, orthonormal columns
    eigenvalues: np.ndarray  # r, non-increasing
    total_variance: float
    all_eigenvalues: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.components.shape[1]

    @property
    def explained_fraction(self) -> np.ndarray:
        return self.eigenvalues / self.total_variance

    @property
    def discarded_variance(self) -> float:
        return float(self.total_variance - self.eigenvalues.sum())

    def discarded_report(self) -> dict:
        return {
            "retained": self.r,
            "explained_fraction": self.explained_fraction.tolist(),
            "total_variance": self.total_variance,
            "discarded_variance": max(self.discarded_variance, 0.0),
            "discarded_fraction": max(self.discarded_variance, 0.0) / self.total_variance,
        }

    def to_json(self) -> str:
        return json.dumps({
            "r": self.r,
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "total_variance": self.total_variance,
            "components": self.components.ravel().tolist(),  # row-major n_z x r
        })

    @classmethod
    def from_json(cls, text: str) -> "PCABasis":
        d = json.loads(text)
        mean = np.asarray(d["mean"], dtype=float)
        comps = np.asarray(d["components"], dtype=float).reshape(mean.size, int(d["r"]))
        return cls(mean, comps, np.asarray(d["eigenvalues"], dtype=float), float(d["total_variance"]))


def _as_matrix(Z) -> np.ndarray:
    if isinstance(Z, ObservationEnsemble):
        return Z.data
    return np.atleast_2d(np.asarray(Z, dtype=float))


def fit_pca(Z, r: int, tol: float = 1e-12) -> PCABasis:
    """Top-``r`` principal directions of the columns of ``Z`` (``n_z x n``).

    Uses the SVD of the centered data with (n - 1) covariance normalization.
    Each component is signed so its largest-magnitude entry is positive.
    """
    data = _as_matrix(Z)
    n_z, n = data.shape
    if n < 2:
        raise DimensionError("PCA needs at least two specimens")
    if r < 1 or r > min(n_z, n - 1):
        raise DimensionError(f"cannot retain {r} components from {n_z} x {n} data")
    mean = data.mean(axis=1)
    centered = data - mean[:, None]
    U, s, _ = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / (n - 1)
    total = float(eig.sum())
    scale = float(np.max(np.abs(data))) or 1.0
    if total <= (tol * scale) ** 2:
        raise DegenerateDataError("observation ensemble has zero variance")
    comps = U[:, :r].copy()
    lead = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[lead, np.arange(r)])
    comps *= signs
    return PCABasis(mean, comps, eig[:r].copy(), total, eig)


def project(basis: PCABasis, y) -> np.ndarray:
    """``q = components^T (y - mean)``; ``y`` may be a vector or an ``n_z x m`` matrix."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != basis.mean.size:
        raise DimensionError("response dimension does not match the basis")
    if y.ndim == 1:
        return basis.components.T @ (y - basis.mean)
    return basis.components.T @ (y - basis.mean[:, None])


def reconstruct(basis: PCABasis, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        return basis.mean + basis.components @ q
    return basis.mean[:, None] + basis.components @ q


def reduced_jacobian(basis: PCABasis, model_jacobian) -> tuple[np.ndarray, float, bool]:
    """Square Jacobian ``components^T J_g`` with its absolute determinant.

    Returns ``(J_q, |det J_q|, singular)``.
    """
    Jg = np.asarray(model_jacobian, dtype=float)
    if Jg.shape[0] != basis.mean.size:
        raise DimensionError("model Jacobian rows must match the response dimension")
    if Jg.shape[1] != basis.r:
        raise DimensionError(
            f"reduced Jacobian must be square: {basis.r} components for {Jg.shape[1]} parameters"
        )
    Jq = basis.components.T @ Jg
    det = abs(float(np.linalg.det(Jq)))
    singular = not math.isfinite(det) or det < SINGULAR_DET
    return Jq, det, singular


@dataclass
class ComponentMarginals:
    """Independent normal laws for the retained components."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_1d(np.asarray(self.means, dtype=float))
        self.stds = np.atleast_1d(np.asarray(self.stds, dtype=float))
        if np.any(self.stds < 0):
            raise ValueError("component std must be >= 0")

    def log_density(self, q) -> float | np.ndarray:
        q = np.asarray(q, dtype=float)
        u = (q.T - self.means) / self.stds
        val = -0.5 * u**2 - np.log(self.stds) - 0.5 * math.log(2 * math.pi)
        return val.sum(axis=-1)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}


def fit_component_marginals(basis: PCABasis, Z) -> ComponentMarginals:
    Q = project(basis, _as_matrix(Z))
    stds = Q.std(axis=1, ddof=1)
    if np.any(stds <= 0):
        raise DegenerateDataError("a retained component has zero spread")
    return ComponentMarginals(Q.mean(axis=1), stds)
