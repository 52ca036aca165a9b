"""Sensitivity measures, error metrics, moment tables and normal-kernel density estimates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats


class DegenerateSamplesError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class PairingError(ValueError):
    pass


@dataclass
class SensitivityReport:
    srcc: np.ndarray  # n_x x n_z
    n: int
    degenerate: np.ndarray  # n_x x n_z bool, True where a column was constant
    provenance: str = ""

    def to_csv(self, path, input_names=None, output_names=None) -> None:
        nx, nz = self.srcc.shape
        input_names = input_names or [f"x_{j + 1}" for j in range(nx)]
        output_names = output_names or [f"y_{t + 1}" for t in range(nz)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", *output_names])
            for name, row in zip(input_names, self.srcc):
                w.writerow([name, *(repr(float(v)) for v in row)])


def _centered_ranks(A: np.ndarray) -> np.ndarray:
    # doubled average ranks are integers, so the sums below are exact
    R2 = np.rint(2.0 * stats.rankdata(A, axis=0)).astype(np.int64)
    return R2 - (A.shape[0] + 1)


def srcc(samples_x, samples_y, provenance: str = "") -> SensitivityReport:
    """Spearman rank correlation between every input column and every output column."""
    X = np.atleast_2d(np.asarray(samples_x, dtype=float))
    Y = np.atleast_2d(np.asarray(samples_y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise PairingError("inputs and outputs must have paired rows")
    if X.shape[0] < 3:
        raise ValueError("SRCC needs at least three samples")
    rx, ry = _centered_ranks(X), _centered_ranks(Y)
    num = rx.T @ ry
    ssx = (rx * rx).sum(axis=0)
    ssy = (ry * ry).sum(axis=0)
    degenerate = (ssx == 0)[:, None] | (ssy == 0)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        M = num / (np.sqrt(ssx.astype(float))[:, None] * np.sqrt(ssy.astype(float))[None, :])
    # Cauchy-Schwarz equality: identical or reversed rankings
    exact = (ssx[:, None] == ssy[None, :]) & (np.abs(num) == ssx[:, None])
    M = np.where(exact, np.sign(num), np.clip(M, -1.0, 1.0))
    M[degenerate] = 0.0
    return SensitivityReport(M.astype(float), X.shape[0], degenerate, provenance)


def mae(data_stat, model_stat) -> float:
    a = np.asarray(data_stat, dtype=float)
    b = np.asarray(model_stat, dtype=float)
    if a.shape != b.shape:
        raise ValueError("MAE needs equal-length vectors")
    # sequential summation keeps results reproducible term by term
    return sum(np.abs(a - b).ravel().tolist()) / a.size


def mape(data_stat, model_stat, zero_tol: float = 1e-12, return_excluded: bool = False):
    """Mean absolute percentage error relative to ``data_stat``.

    Components with ``|data_stat| < zero_tol`` are left out and counted.
    """
    a = np.asarray(data_stat, dtype=float)
    b = np.asarray(model_stat, dtype=float)
    if a.shape != b.shape:
        raise ValueError("MAPE needs equal-length vectors")
    keep = np.abs(a) >= zero_tol
    if not keep.any():
        raise UndefinedMetricError("every reference value is zero; MAPE undefined")
    terms = np.abs((a[keep] - b[keep]) / a[keep]).tolist()
    val = 100.0 * sum(terms) / len(terms)
    if return_excluded:
        return val, int((~keep).sum())
    return val


@dataclass
class ComparisonTable:
    """Rows of named sample sets; columns mean/std per variable and correlations per pair."""

    rows: list[str]
    variables: list[str]
    pairs: list[tuple[str, str]]
    mean: dict = field(default_factory=dict)  # (row, var) -> value
    std: dict = field(default_factory=dict)
    corr: dict = field(default_factory=dict)  # (row, pair) -> value or nan
    counts: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # (row, metric) -> value

    def header(self) -> list[str]:
        h = ["row"]
        h += [f"mean_{v}" for v in self.variables]
        h += [f"std_{v}" for v in self.variables]
        h += [f"corr_{a}_{b}" for a, b in self.pairs]
        h += [f"n_{v}" for v in self.variables]
        return h

    def records(self) -> list[list]:
        out = []
        for r in self.rows:
            rec = [r]
            rec += [self.mean[(r, v)] for v in self.variables]
            rec += [self.std[(r, v)] for v in self.variables]
            rec += [self.corr[(r, p)] for p in self.pairs]
            rec += [self.counts[(r, v)] for v in self.variables]
            out.append(rec)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for rec in self.records():
                w.writerow([rec[0], *(_fmt(v) for v in rec[1:])])
            if self.errors:
                w.writerow([])
                metrics = sorted({m for _, m in self.errors})
                w.writerow(["row", *metrics])
                for r in self.rows:
                    if any((r, m) in self.errors for m in metrics):
                        w.writerow([r, *(_fmt(self.errors.get((r, m), float("nan"))) for m in metrics)])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _pair_arrays(sset: Mapping, a: str, b: str):
    for key in ((a, b), (b, a)):
        if key in sset:
            x, y = sset[key]
            return (x, y) if key == (a, b) else (y, x)
    x, y = np.asarray(sset[a], dtype=float), np.asarray(sset[b], dtype=float)
    if x.shape != y.shape:
        raise PairingError(f"{a} and {b} are not paired samples ({x.size} vs {y.size})")
    return x, y


def moment_table(sets: Mapping[str, Mapping], variables: Sequence[str],
                 pairs: Sequence[tuple[str, str]] = ()) -> ComparisonTable:
    """Sample mean, std (n-1) and Pearson correlations per named sample set.

    Each set maps variable names to 1-d samples. Correlations for variables
    observed on different specimens can be supplied as an explicit tuple key
    ``(a, b) -> (x_a, x_b)`` of paired arrays; otherwise unequal lengths raise.
    A correlation involving a constant sample is reported as NaN.
    """
    table = ComparisonTable(list(sets), list(variables), [tuple(p) for p in pairs])
    for name, sset in sets.items():
        for v in variables:
            x = np.asarray(sset[v], dtype=float)
            if x.size == 0:
                raise ValueError(f"{name}: empty sample for {v}")
            table.mean[(name, v)] = float(np.mean(x))
            table.std[(name, v)] = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
            table.counts[(name, v)] = int(x.size)
        for a, b in table.pairs:
            x, y = _pair_arrays(sset, a, b)
            x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
            if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
                table.corr[(name, (a, b))] = float("nan")
            else:
                table.corr[(name, (a, b))] = float(np.corrcoef(x, y)[0, 1])
    return table


class GaussianKDE:
    """One-dimensional normal-kernel density with Silverman's bandwidth."""

    def __init__(self, samples, bandwidth: float | None = None):
        x = np.asarray(samples, dtype=float).ravel()
        if x.size < 2:
            raise DegenerateSamplesError("KDE needs at least two samples")
        sd = float(np.std(x, ddof=1))
        if sd <= 0:
            raise DegenerateSamplesError("KDE samples have zero spread")
        self.samples = x
        self.bandwidth = float(bandwidth) if bandwidth else 1.06 * sd * x.size ** (-0.2)

    def pdf(self, grid):
        return np.exp(self.logpdf(grid))

    def logpdf(self, grid):
        g = np.asarray(grid, dtype=float)
        u = (g[..., None] - self.samples) / self.bandwidth
        return (special.logsumexp(-0.5 * u * u, axis=-1)
                - math.log(self.samples.size * self.bandwidth * math.sqrt(2 * math.pi)))

    def cdf(self, grid):
        g = np.asarray(grid, dtype=float)
        return np.mean(special.ndtr((g[..., None] - self.samples) / self.bandwidth), axis=-1)

    def sf(self, grid):
        g = np.asarray(grid, dtype=float)
        return np.mean(special.ndtr((self.samples - g[..., None]) / self.bandwidth), axis=-1)

    def to_dict(self) -> dict:
        return {"bandwidth": self.bandwidth, "n": int(self.samples.size),
                "mean": float(self.samples.mean()), "std": float(self.samples.std(ddof=1))}


def kde_normal(samples, grid) -> np.ndarray:
    return GaussianKDE(samples).pdf(grid)
