"""Random-walk Metropolis sampling, acceptance-rate tuning and chain diagnostics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import RandomSource

logger = logging.getLogger(__name__)

LogDensity = Callable[[np.ndarray], float]


class TargetError(RuntimeError):
    """Target density returned NaN."""


class InitializationError(RuntimeError):
    """Initial state has zero target density."""


class TuningError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class ProposalSpec:
    """Diagonal Gaussian random-walk step."""

    stds: np.ndarray

    def __post_init__(self):
        self.stds = np.atleast_1d(np.asarray(self.stds, dtype=float)).copy()
        if np.any(~np.isfinite(self.stds)) or np.any(self.stds <= 0):
            raise ValueError("proposal stds must be positive and finite")


@dataclass
class Chain:
    states: np.ndarray  # steps x dim
    log_densities: np.ndarray
    accepted: np.ndarray  # acceptance fraction of each step (0/1 for plain RW)
    burn_in: int = 0
    proposal: ProposalSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.log_densities = np.asarray(self.log_densities, dtype=float)
        self.accepted = np.asarray(self.accepted, dtype=float)
        if not 0 <= self.burn_in < len(self):
            raise ValueError("burn-in must be shorter than the chain")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def samples(self) -> np.ndarray:
        return self.states[self.burn_in :]

    @property
    def post_log_densities(self) -> np.ndarray:
        return self.log_densities[self.burn_in :]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted[self.burn_in :]))

    def to_csv(self, path, names=None) -> None:
        names = names or [f"x_{j + 1}" for j in range(self.dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "logp", "accepted", *names])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.log_densities[i])), repr(float(self.accepted[i])),
                            *(repr(float(v)) for v in self.states[i])])

    def summary_json(self) -> str:
        return json.dumps({
            "length": len(self),
            "burn_in": self.burn_in,
            "acceptance_rate": self.acceptance_rate,
            "proposal_stds": None if self.proposal is None else self.proposal.stds.tolist(),
            **self.meta,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, burn_in: int = 0) -> "Chain":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: chain file has no samples")
        arr = np.asarray(rows[1:], dtype=float)
        return cls(arr[:, 3:], arr[:, 1], arr[:, 2], burn_in)


def _check(logp: float) -> float:
    if math.isnan(logp):
        raise TargetError("target log-density returned NaN")
    return logp


def metropolis_step(state, target: LogDensity, proposal: ProposalSpec, rng: RandomSource,
                    logp: float | None = None):
    """One random-walk Metropolis move.

    Returns ``(new_state, new_logp, accepted)``. Proposals with -inf density
    are always rejected; NaN aborts.
    """
    state = np.asarray(state, dtype=float)
    if logp is None:
        logp = _check(float(target(state)))
    cand = state + proposal.stds * rng.gen.standard_normal(state.shape)
    u = rng.gen.random()
    log_u = math.log(u) if u > 0 else -math.inf
    return _accept(state, logp, cand, _check(float(target(cand))), log_u)


def _accept(state, logp, cand, cand_logp, log_u):
    if cand_logp == -math.inf:
        return state, logp, False
    if log_u < cand_logp - logp:
        return cand, cand_logp, True
    return state, logp, False


def _log_uniforms(rng: RandomSource, n: int) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(rng.gen.random(n))


def run_chain(target: LogDensity, proposal: ProposalSpec, init, n_steps: int,
              burn_in_fraction: float, rng: RandomSource) -> Chain:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 <= burn_in_fraction < 1:
        raise ValueError("burn-in fraction must lie in [0, 1)")
    x = np.asarray(init, dtype=float).copy()
    logp = _check(float(target(x)))
    if logp == -math.inf:
        raise InitializationError("initial state has zero target density")
    d = x.size
    steps = proposal.stds * rng.gen.standard_normal((n_steps, d))
    log_u = _log_uniforms(rng, n_steps)
    states = np.empty((n_steps, d))
    lps = np.empty(n_steps)
    acc = np.zeros(n_steps)
    for i in range(n_steps):
        cand = x + steps[i]
        x, logp, a = _accept(x, logp, cand, _check(float(target(cand))), log_u[i])
        states[i] = x
        lps[i] = logp
        acc[i] = a
    burn = min(int(burn_in_fraction * n_steps), n_steps - 1)
    return Chain(states, lps, acc, burn, ProposalSpec(proposal.stds))


def tune_proposal(target: LogDensity, init, rng: RandomSource, band=(0.20, 0.50),
                  initial=None, factor: float = 1.5, window: int = 1000,
                  max_iter: int = 50) -> ProposalSpec:
    """Scale a diagonal step by ``factor`` between pilot runs until the pilot
    acceptance rate falls inside ``band``.

    Each pilot continues from the last state of the previous one. The result is
    meant to be frozen for the production chain.
    """
    lo, hi = band
    if not 0 < lo < hi < 1:
        raise ValueError("acceptance band must satisfy 0 < low < high < 1")
    x = np.asarray(init, dtype=float)
    if initial is None:
        stds = np.ones(x.size)
    elif isinstance(initial, ProposalSpec):
        stds = initial.stds.copy()
    else:
        stds = np.broadcast_to(np.asarray(initial, dtype=float), x.shape).copy()
    trace = []
    for it in range(max_iter):
        pilot = run_chain(target, ProposalSpec(stds), x, window, 0.0, rng)
        rate = float(pilot.accepted.mean())
        trace.append({"round": it, "scale": float(stds.mean()), "acceptance": rate})
        logger.debug("tuning round %d: acceptance %.3f", it, rate)
        x = pilot.states[-1]
        if lo <= rate <= hi:
            return ProposalSpec(stds)
        stds = stds / factor if rate < lo else stds * factor
    raise TuningError(f"acceptance band {band} not reached in {max_iter} pilot rounds", trace)


def batch_metropolis(W, logp, target_rows: Callable, stds, rng: RandomSource):
    """Independent Metropolis moves for each row of ``W``.

    ``target_rows`` maps an ``(m, d)`` array to ``m`` log-densities. Valid as a
    simultaneous update only when rows are conditionally independent.
    Returns ``(W, logp, accepted_mask, aux)`` where ``aux`` is whatever extra
    per-row payload ``target_rows`` returns as a second value (or None).
    """
    cand = W + stds * rng.gen.standard_normal(W.shape)
    log_u = _log_uniforms(rng, W.shape[0])
    out = target_rows(cand)
    aux = None
    if isinstance(out, tuple):
        out, aux = out
    if np.any(np.isnan(out)):
        raise TargetError("target log-density returned NaN")
    with np.errstate(invalid="ignore"):
        acc = (out > -np.inf) & (log_u < out - logp)
    W = np.where(acc[:, None], cand, W)
    logp = np.where(acc, out, logp)
    return W, logp, acc, aux


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def effective_sample_size(x) -> float:
    """ESS via Geyer's initial positive sequence; 1.0 for a constant chain."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2 or np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)
    tau = -1.0
    for k in range(0, n - 1, 2):
        gamma = rho[k] + rho[k + 1]
        if gamma <= 0:
            break
        tau += 2.0 * gamma
    return float(n / max(tau, 1e-12))


@dataclass
class ChainDiagnostics:
    running_means: np.ndarray  # checkpoints x dim
    checkpoints: np.ndarray
    ess: np.ndarray
    acceptance_rate: float


def diagnostics(chain: Chain, n_checkpoints: int = 100) -> ChainDiagnostics:
    S = chain.samples
    n = S.shape[0]
    if n < 10:
        raise ValueError("diagnostics need at least 10 post-burn-in states")
    cum = np.cumsum(S, axis=0) / np.arange(1, n + 1)[:, None]
    cps = np.unique(np.linspace(1, n, min(n_checkpoints, n)).astype(int))
    ess = np.array([effective_sample_size(S[:, j]) for j in range(S.shape[1])])
    return ChainDiagnostics(cum[cps - 1], cps, ess, chain.acceptance_rate)
