"""Run configuration: YAML schema, validation and environment overrides.

Schema (all blocks optional except ``experiment`` and ``model``)::

    experiment: damage-verification
    model: damage | toy
    formulation: bayes | transform | both
    seed: 2024
    output: runs/damage
    data:
      paths: {tensile: ..., cyclic: ...}      # damage; or {curves: ...} for toy
      synthetic: {...}                         # used when no paths are given
    surrogate: {degree: 8, n_train: 10000, cv_degrees: [2, 3, 4], k_folds: 5, n_cv: 2000}
    mcmc:
      bayes: {steps: 50000, burn_in: 0.2, band: [0.2, 0.5], window: 1000, max_rounds: 50, hyper_substeps: 5}
      transform: {steps: 100000, burn_in: 0.2, band: [0.2, 0.5], window: 1000, max_rounds: 50}
    transform: {n_sim: 10000, rounds: 0}
    predictive: {n_sim: 10000, epistemic_draws: 100, epistemic_n_sim: 1000}
    diagnose: {n_srcc: 10000, checkpoints: 100, grid_points: 201, chain: path}  # n_srcc: damage only
    compare: {tables: {label: path, ...}}

Only ``STOCHINV_SEED`` and ``STOCHINV_OUT`` may override values from the
environment.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

MODELS = ("damage", "toy")
FORMULATIONS = ("bayes", "transform", "both")


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


@dataclass
class DamageSynthetic:
    n_tensile: int = 50
    n_cyclic: int = 30
    sigma_tensile: float = 0.1
    sigma_cyclic: float = 0.8
    alpha: float = 2.0
    beta: float = 2.0
    delta_eps: float = 0.03


@dataclass
class ToySynthetic:
    n: int = 16
    n_t: int = 568
    t_end: float = 60.0
    sigma: float = 0.01


@dataclass
class SurrogateConfig:
    degree: int = 8
    n_train: int = 10000
    cv_degrees: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    k_folds: int = 5
    n_cv: int = 2000


@dataclass
class ChainConfig:
    steps: int = 50000
    burn_in: float = 0.2
    band: list = field(default_factory=lambda: [0.2, 0.5])
    window: int = 1000
    max_rounds: int = 50
    hyper_substeps: int = 5


@dataclass
class MCMCConfig:
    bayes: ChainConfig = field(default_factory=ChainConfig)
    transform: ChainConfig = field(default_factory=lambda: ChainConfig(steps=100000))


@dataclass
class TransformSettings:
    n_sim: int = 10000
    rounds: int = 0


@dataclass
class PredictiveConfig:
    n_sim: int = 10000
    epistemic_draws: int = 100
    epistemic_n_sim: int = 1000


@dataclass
class DiagnoseConfig:
    n_srcc: int = 10000
    checkpoints: int = 100
    grid_points: int = 201
    chain: str | None = None


@dataclass
class DataConfig:
    paths: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    experiment: str
    model: str
    formulation: str = "both"
    seed: int = 2024
    output: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    transform: TransformSettings = field(default_factory=TransformSettings)
    predictive: PredictiveConfig = field(default_factory=PredictiveConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    compare: dict = field(default_factory=dict)

    def synthetic(self):
        cls = DamageSynthetic if self.model == "damage" else ToySynthetic
        return _build(cls, self.data.synthetic, "data.synthetic")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_NESTED = {
    "data": DataConfig,
    "surrogate": SurrogateConfig,
    "mcmc": MCMCConfig,
    "transform": TransformSettings,
    "predictive": PredictiveConfig,
    "diagnose": DiagnoseConfig,
    "bayes": ChainConfig,
}


def _coerce(value, default, where: str):
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def _build(cls, raw, where: str, proto=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    if proto is None:
        proto = RunConfig("", "") if cls is RunConfig else cls()
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        path = f"{where}.{name}" if where else name
        if name in _NESTED and cls is not SurrogateConfig:
            sub = ChainConfig if cls is MCMCConfig else _NESTED[name]
            kwargs[name] = _build(sub, raw[name], path, getattr(proto, name))
        else:
            default = getattr(proto, name)
            kwargs[name] = _coerce(raw[name], default, path)
    return replace(proto, **kwargs)


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> RunConfig:
    _check(cfg.model in MODELS, f"model: must be one of {MODELS}, got {cfg.model!r}")
    _check(cfg.formulation in FORMULATIONS, f"formulation: must be one of {FORMULATIONS}, got {cfg.formulation!r}")
    _check(bool(cfg.experiment), "experiment: must be a non-empty name")
    _check(0 <= cfg.seed < 2**64, "seed: must be an unsigned 64-bit integer")
    for name in ("bayes", "transform"):
        c: ChainConfig = getattr(cfg.mcmc, name)
        w = f"mcmc.{name}"
        _check(c.steps >= 1, f"{w}.steps: must be >= 1")
        _check(0.0 <= c.burn_in < 1.0, f"{w}.burn_in: must lie in [0, 1)")
        _check(len(c.band) == 2 and all(isinstance(b, (int, float)) for b in c.band)
               and 0 < c.band[0] < c.band[1] < 1,
               f"{w}.band: need two rates 0 < low < high < 1")
        _check(c.window >= 1, f"{w}.window: must be >= 1")
        _check(c.max_rounds >= 1, f"{w}.max_rounds: must be >= 1")
        _check(c.hyper_substeps >= 1, f"{w}.hyper_substeps: must be >= 1")
    s = cfg.surrogate
    _check(s.degree >= 0, "surrogate.degree: must be >= 0")
    _check(s.n_train >= 1, "surrogate.n_train: must be >= 1")
    _check(all(isinstance(d, int) and d >= 0 for d in s.cv_degrees), "surrogate.cv_degrees: non-negative integers")
    _check(s.k_folds >= 2, "surrogate.k_folds: must be >= 2")
    _check(cfg.transform.n_sim >= 10, "transform.n_sim: must be >= 10")
    _check(cfg.transform.rounds >= 0, "transform.rounds: must be >= 0")
    _check(cfg.predictive.n_sim >= 2, "predictive.n_sim: must be >= 2")
    _check(cfg.diagnose.n_srcc >= 3, "diagnose.n_srcc: must be >= 3")
    _check(cfg.diagnose.checkpoints >= 1, "diagnose.checkpoints: must be >= 1")
    _check(cfg.diagnose.grid_points >= 2, "diagnose.grid_points: must be >= 2")
    cfg.synthetic()  # schema check of the synthetic block
    return cfg


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    for req in ("experiment", "model"):
        if req not in raw:
            raise ConfigError(f"{req}: required field missing")
    raw = copy.deepcopy(raw)
    cfg = _build(RunConfig, raw, "")
    return validate(cfg)


def apply_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None,
                    environ=None) -> RunConfig:
    """Environment first, then explicit command-line values."""
    environ = os.environ if environ is None else environ
    if "STOCHINV_SEED" in environ:
        try:
            cfg.seed = int(environ["STOCHINV_SEED"])
        except ValueError:
            raise ConfigError(f"STOCHINV_SEED: not an integer: {environ['STOCHINV_SEED']!r}") from None
    if "STOCHINV_OUT" in environ:
        cfg.output = environ["STOCHINV_OUT"]
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.output = str(out)
    return validate(cfg)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(raw or {})
