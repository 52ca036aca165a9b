"""Parametric families, seeded random streams, Latin hypercube designs and the
bivariate Gaussian copula used for dependent parameter priors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

FAMILIES = ("uniform", "normal", "lognormal", "beta")

_PARAM_NAMES = {
    "uniform": ("a", "b"),
    "normal": ("mean", "std"),
    "lognormal": ("mean", "std"),
    "beta": ("alpha", "beta", "a", "b"),
}

# |Phi^{-1}(u)| never exceeds this for u representable away from {0, 1}
LATENT_CLIP = 8.29


class ParameterDomainError(ValueError):
    """Invalid hyperparameters or an argument outside an operation's domain."""


class CopulaBoundaryError(ValueError):
    """Copula density requested on the boundary of the unit square."""


class RandomSource:
    """Seeded stream of random numbers.

    Wraps a PCG64 generator seeded through ``SeedSequence``. Independent child
    streams are derived from ``(seed, stream index)`` so parallel tasks stay
    reproducible regardless of scheduling.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ParameterDomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=self.stream))
        )

    def derive(self, index: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream + (int(index),))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream={self.stream})"


def _lognormal_underlying(mean: float, std: float) -> tuple[float, float]:
    s2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - 0.5 * s2, math.sqrt(s2)


@dataclass(frozen=True)
class DistributionSpec:
    """A univariate law from one of ``FAMILIES``.

    ``params`` follow the family's named order: uniform ``(a, b)``, normal
    ``(mean, std)``, lognormal ``(mean, std)`` of the variable itself, beta
    ``(alpha, beta, a, b)`` where ``[a, b]`` is the support the unit Beta law
    is scaled to.
    """

    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterDomainError(f"unknown family {self.family!r}")
        params = tuple(float(p) for p in self.params)
        if self.family == "beta" and len(params) == 2:
            params = params + (0.0, 1.0)
        object.__setattr__(self, "params", params)
        names = _PARAM_NAMES[self.family]
        if len(params) != len(names):
            raise ParameterDomainError(
                f"{self.family} expects parameters {names}, got {len(params)} values"
            )
        if not all(math.isfinite(p) for p in params):
            raise ParameterDomainError(f"non-finite parameter in {self}")
        p = dict(zip(names, params))
        if "std" in p and p["std"] <= 0:
            raise ParameterDomainError(f"{self.family}: std must be positive")
        if "b" in p and p["b"] <= p["a"]:
            raise ParameterDomainError(f"{self.family}: need b > a")
        if self.family == "lognormal" and p["mean"] <= 0:
            raise ParameterDomainError("lognormal: mean must be positive")
        if self.family == "beta" and (p["alpha"] <= 0 or p["beta"] <= 0):
            raise ParameterDomainError("beta: alpha and beta must be positive")

    # constructors -------------------------------------------------------
    @classmethod
    def uniform(cls, a, b):
        return cls("uniform", (a, b))

    @classmethod
    def normal(cls, mean, std):
        return cls("normal", (mean, std))

    @classmethod
    def lognormal(cls, mean, std):
        return cls("lognormal", (mean, std))

    @classmethod
    def beta(cls, alpha, beta, a=0.0, b=1.0):
        return cls("beta", (alpha, beta, a, b))

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {"family": self.family, **dict(zip(_PARAM_NAMES[self.family], self.params))}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        d = dict(d)
        family = d.pop("family", None)
        if family not in FAMILIES:
            raise ParameterDomainError(f"unknown family {family!r}")
        names = _PARAM_NAMES[family]
        if family == "beta":
            d.setdefault("a", 0.0)
            d.setdefault("b", 1.0)
        missing = [n for n in names if n not in d]
        extra = sorted(set(d) - set(names))
        if missing or extra:
            raise ParameterDomainError(
                f"{family}: missing fields {missing}, unexpected fields {extra}"
            )
        return cls(family, tuple(d[n] for n in names))

    # moments and support ------------------------------------------------
    @property
    def support(self) -> tuple[float, float]:
        if self.family in ("uniform", "beta"):
            return self.params[-2], self.params[-1]
        if self.family == "lognormal":
            return 0.0, math.inf
        return -math.inf, math.inf

    @property
    def mean(self) -> float:
        f, p = self.family, self.params
        if f == "uniform":
            return 0.5 * (p[0] + p[1])
        if f in ("normal", "lognormal"):
            return p[0]
        al, be, a, b = p
        return a + (b - a) * al / (al + be)

    @property
    def std(self) -> float:
        f, p = self.family, self.params
        if f == "uniform":
            return (p[1] - p[0]) / math.sqrt(12.0)
        if f in ("normal", "lognormal"):
            return p[1]
        al, be, a, b = p
        return (b - a) * math.sqrt(al * be / ((al + be) ** 2 * (al + be + 1.0)))

    # densities ----------------------------------------------------------
    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        f, p = self.family, self.params
        with np.errstate(divide="ignore", invalid="ignore"):
            if f == "uniform":
                inside = (x >= p[0]) & (x <= p[1])
                return np.where(inside, -math.log(p[1] - p[0]), -np.inf)
            if f == "normal":
                u = (x - p[0]) / p[1]
                return -0.5 * u * u - math.log(p[1]) - 0.5 * math.log(2 * math.pi)
            if f == "lognormal":
                m, s = _lognormal_underlying(*p)
                lx = np.log(np.where(x > 0, x, 1.0))
                val = -lx - math.log(s) - 0.5 * math.log(2 * math.pi) - 0.5 * ((lx - m) / s) ** 2
                return np.where(x > 0, val, -np.inf)
            al, be, a, b = p
            y = (x - a) / (b - a)
            inside = (y > 0) & (y < 1)
            yc = np.where(inside, y, 0.5)
            val = (
                (al - 1) * np.log(yc)
                + (be - 1) * np.log1p(-yc)
                - special.betaln(al, be)
                - math.log(b - a)
            )
            return np.where(inside, val, -np.inf)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        f, p = self.family, self.params
        if f == "uniform":
            return np.clip((x - p[0]) / (p[1] - p[0]), 0.0, 1.0)
        if f == "normal":
            return special.ndtr((x - p[0]) / p[1])
        if f == "lognormal":
            m, s = _lognormal_underlying(*p)
            with np.errstate(divide="ignore"):
                z = (np.log(np.where(x > 0, x, 0.0)) - m) / s
            return np.where(x > 0, special.ndtr(z), 0.0)
        al, be, a, b = p
        y = np.clip((x - a) / (b - a), 0.0, 1.0)
        return special.betainc(al, be, y)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        if np.any((q < 0) | (q > 1)) or np.any(np.isnan(q)):
            raise ParameterDomainError("quantile argument must lie in [0, 1]")
        f, p = self.family, self.params
        if f == "uniform":
            return p[0] + (p[1] - p[0]) * q
        if f == "normal":
            return p[0] + p[1] * special.ndtri(q)
        if f == "lognormal":
            m, s = _lognormal_underlying(*p)
            return np.exp(m + s * special.ndtri(q))
        al, be, a, b = p
        return a + (b - a) * special.betaincinv(al, be, q)

    def quantile(self, q):
        """Inverse CDF restricted to the open interval (0, 1)."""
        q = np.asarray(q, dtype=float)
        if np.any((q <= 0) | (q >= 1)) or np.any(np.isnan(q)):
            raise ParameterDomainError("quantile argument must lie in the open interval (0, 1)")
        return self.ppf(q)

    def median(self) -> float:
        return float(self.ppf(0.5))

    def sample(self, rng: RandomSource, n: int) -> np.ndarray:
        if n < 1:
            raise ParameterDomainError(f"sample count must be >= 1, got {n}")
        g, f, p = rng.gen, self.family, self.params
        if f == "uniform":
            return g.uniform(p[0], p[1], size=n)
        if f == "normal":
            return g.normal(p[0], p[1], size=n)
        if f == "lognormal":
            m, s = _lognormal_underlying(*p)
            return g.lognormal(m, s, size=n)
        al, be, a, b = p
        return a + (b - a) * g.beta(al, be, size=n)


def sample(spec: DistributionSpec, rng: RandomSource, n: int) -> np.ndarray:
    return spec.sample(rng, n)


def density_cdf_quantile(spec: DistributionSpec, x: float):
    """Return ``(pdf(x), cdf(x), spec.quantile)``."""
    return float(spec.pdf(x)), float(spec.cdf(x)), spec.quantile


def lhs_sample(domain: Sequence[DistributionSpec], rng: RandomSource, n: int) -> np.ndarray:
    """Random-permutation Latin hypercube design mapped through each marginal quantile.

    Returns an ``(n, len(domain))`` array with exactly one point per equiprobable
    stratum in every dimension.
    """
    if n < 1:
        raise ParameterDomainError(f"sample count must be >= 1, got {n}")
    out = np.empty((n, len(domain)))
    for j, spec in enumerate(domain):
        perm = rng.gen.permutation(n)
        u = (perm + rng.gen.random(n)) / n
        # u == 0 only when random() returns exactly 0.0
        u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
        out[:, j] = spec.ppf(u)
    return out


def latent_normal(cdf, sf=None):
    """Standard-normal scores ``Phi^{-1}(u)`` with tail-accurate handling.

    ``sf`` is the complementary probability ``1 - u`` when it can be computed
    without cancellation; scores are clipped to +-LATENT_CLIP.
    """
    cdf = np.asarray(cdf, dtype=float)
    if sf is None:
        sf = 1.0 - cdf
    with np.errstate(divide="ignore"):
        z = np.where(cdf < 0.5, special.ndtri(cdf), -special.ndtri(sf))
    return np.clip(z, -LATENT_CLIP, LATENT_CLIP)


def gaussian_copula_logdensity_latent(z1, z2, rho):
    """log c_rho evaluated at latent normal scores."""
    rho = np.asarray(rho, dtype=float)
    one_m = 1.0 - rho * rho
    quad = (rho * rho * (z1 * z1 + z2 * z2) - 2.0 * rho * z1 * z2) / (2.0 * one_m)
    return -0.5 * np.log(one_m) - quad


@dataclass(frozen=True)
class GaussianCopula:
    """Bivariate Gaussian copula with correlation ``rho`` coupling two marginals."""

    rho: float
    marginal_1: DistributionSpec | None = None
    marginal_2: DistributionSpec | None = None

    def __post_init__(self):
        if not (-1.0 < self.rho < 1.0):
            raise ParameterDomainError(f"copula correlation must lie in (-1, 1), got {self.rho}")

    def density(self, u, v):
        return np.exp(self.logdensity(u, v))

    def logdensity(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any((u <= 0) | (u >= 1) | (v <= 0) | (v >= 1)):
            raise CopulaBoundaryError("copula density is defined on the open unit square only")
        if self.rho == 0.0:
            return np.zeros(np.broadcast(u, v).shape)
        return gaussian_copula_logdensity_latent(special.ndtri(u), special.ndtri(v), self.rho)

    def joint_logpdf(self, x1, x2):
        """log f(x1, x2) = log c(F1(x1), F2(x2)) + log f1(x1) + log f2(x2)."""
        m1, m2 = self._marginals()
        lp = m1.logpdf(x1) + m2.logpdf(x2)
        if self.rho == 0.0:
            return lp
        z1 = latent_normal(m1.cdf(x1))
        z2 = latent_normal(m2.cdf(x2))
        return lp + gaussian_copula_logdensity_latent(z1, z2, self.rho)

    def sample(self, rng: RandomSource, n: int) -> np.ndarray:
        m1, m2 = self._marginals()
        if n < 1:
            raise ParameterDomainError(f"sample count must be >= 1, got {n}")
        e = rng.gen.standard_normal((n, 2))
        z1 = e[:, 0]
        z2 = self.rho * e[:, 0] + math.sqrt(1.0 - self.rho**2) * e[:, 1]
        u = np.clip(special.ndtr(np.stack([z1, z2], axis=1)), 1e-300, 1.0 - 1e-16)
        return np.stack([m1.ppf(u[:, 0]), m2.ppf(u[:, 1])], axis=1)

    def _marginals(self):
        if self.marginal_1 is None or self.marginal_2 is None:
            raise ParameterDomainError("copula marginals are not set")
        return self.marginal_1, self.marginal_2


def copula_density(c: GaussianCopula, u, v):
    return c.density(u, v)


def copula_sample(c: GaussianCopula, rng: RandomSource, n: int) -> np.ndarray:
    return c.sample(rng, n)
