"""Command-line front end: ``stochinv {generate,fit-surrogate,infer,diagnose,compare}``.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, hier, recipes
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .diagnostics import GaussianKDE, srcc
from .distributions import DistributionSpec, lhs_sample
from .mcmc import Chain, InitializationError, TargetError, TuningError, diagnostics
from .models import DAMAGE_BOX, ModelDomainError, damage_model
from .pca import DegenerateDataError, DimensionError
from .pce import IllConditionedError, PCESurrogate
from .recipes import DataError
from .transform import InfeasibleProblemError, InsufficientSimulationError

logger = logging.getLogger("stochinv")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

NUMERICAL_ERRORS = (IllConditionedError, TuningError, InitializationError, TargetError,
                    InfeasibleProblemError, DegenerateDataError, ModelDomainError,
                    InsufficientSimulationError, DimensionError, FloatingPointError)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunContext:
    """Output directory, emitted-file inventory and the run manifest."""

    def __init__(self, cfg: RunConfig, command: str, threads: int):
        self.cfg = cfg
        self.command = command
        self.threads = threads
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def add(self, paths) -> None:
        self.files.extend(paths)

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p

    def timed(self, label: str):
        ctx = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                ctx.timings[label] = time.perf_counter() - self.t

        return _T()

    def finish(self, extra: dict | None = None) -> Path:
        cfg_path = self.path("resolved_config.yaml")
        cfg_path.write_text(self.cfg.to_yaml())
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "threads": self.threads,
            "versions": {"stochinv": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__},
            "timings_seconds": self.timings,
            "files": {str(p.relative_to(self.out)): sha256(p) for p in sorted(set(self.files))},
            **(extra or {}),
        }
        mp = self.out / f"manifest_{self.command}.json"
        mp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return mp


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(ctx: RunContext) -> None:
    cfg = ctx.cfg
    with ctx.timed("generate"):
        if cfg.model == "damage":
            ctx.add(recipes.damage_data(cfg).write(ctx.out))
        else:
            ens = recipes.toy_data(cfg)
            d, p = recipes.TOY_FILES
            ens.to_csv(ctx.out / d, ctx.out / p)
            ctx.add([ctx.out / d, ctx.out / p])


def _load_surrogate(ctx: RunContext) -> PCESurrogate:
    src = ctx.cfg.data.paths.get("surrogate")
    path = Path(src) if src else ctx.out / "surrogate.json"
    if path.exists():
        return PCESurrogate.from_json(path.read_text())
    logger.info("no surrogate at %s; fitting one", path)
    return _fit_surrogate(ctx).surrogate


def _fit_surrogate(ctx: RunContext) -> recipes.SurrogateFit:
    with ctx.timed("fit_surrogate"):
        fit = recipes.toy_surrogate(ctx.cfg)
    ctx.path("surrogate.json").write_text(fit.surrogate.to_json() + "\n")
    if fit.cv is not None:
        rows = fit.cv.rows()
        _write_table(ctx.path("cv_scores.csv"), ["degree", "basis_size", "cv_rmse", "relative_cv_rmse"],
                     [[str(r["degree"]), str(r["basis_size"]), r["cv_rmse"], r["relative_cv_rmse"]] for r in rows])
    return fit


def cmd_fit_surrogate(ctx: RunContext) -> dict:
    if ctx.cfg.model != "toy":
        raise ConfigError("model: fit-surrogate applies to the toy model; the damage model is used exactly")
    fit = _fit_surrogate(ctx)
    return {"cv_selected_degree": None if fit.cv is None else fit.cv.selected,
            "fitted_degree": ctx.cfg.surrogate.degree,
            "train_rmse": fit.surrogate.train_rmse}


def _write_bayes(ctx: RunContext, res: hier.HierResult, extra: dict) -> None:
    names = res.model.prior.theta_names
    theta_chain = Chain(res.chain.states[:, -res.model.n_theta:], res.chain.log_densities,
                        res.chain.accepted, res.chain.burn_in)
    theta_chain.to_csv(ctx.path("chain_bayes.csv"), names)
    summary = res.summary.to_dict()
    summary["map_state"] = {"X": res.summary.map_state.X, "theta": res.summary.map_state.theta}
    summary["ess"] = recipes.chain_ess(res.theta_samples(), names)
    summary["tuning"] = res.tuning_trace
    summary["chain"] = {"length": len(res.chain), "burn_in": res.chain.burn_in, **res.chain.meta}
    summary.update(extra)
    ctx.write_json("summary_bayes.json", summary)


def _write_transform(ctx: RunContext, run: recipes.TransformRun) -> None:
    res = run.final
    res.write_samples(ctx.path("samples_transform.csv"), run.problem.names)
    summary = dict(res.summary)
    summary["ess"] = recipes.chain_ess(res.chain.samples, run.problem.names)
    summary["correlation_trace"] = run.trace
    summary["density"] = res.density_summary
    ctx.write_json("summary_transform.json", summary)


def cmd_infer(ctx: RunContext) -> None:
    cfg = ctx.cfg
    want_b = cfg.formulation in ("bayes", "both")
    want_t = cfg.formulation in ("transform", "both")
    bayes = trans = None
    if cfg.model == "damage":
        data = recipes.damage_data(cfg)
        if want_b:
            with ctx.timed("bayes"):
                bayes = recipes.damage_bayes(cfg, data)
        if want_t:
            with ctx.timed("transform"):
                trans = recipes.damage_transform(cfg, data, ctx.threads)
        with ctx.timed("comparison"):
            table, extra = recipes.damage_comparison(cfg, data, bayes, trans)
    else:
        ens = recipes.toy_data(cfg)
        sur = _load_surrogate(ctx)
        if want_b:
            with ctx.timed("bayes"):
                bayes = recipes.toy_bayes(cfg, ens, sur)
        if want_t:
            with ctx.timed("transform"):
                trans = recipes.toy_transform(cfg, ens, sur)
        with ctx.timed("comparison"):
            table, extra = recipes.toy_comparison(cfg, ens, bayes, trans)
    if bayes is not None:
        _write_bayes(ctx, bayes, extra)
    if trans is not None:
        _write_transform(ctx, trans)
    table.to_csv(ctx.path("comparison.csv"))


def _kde_csv(path: Path, samples, n_grid: int) -> None:
    k = GaussianKDE(samples)
    lo, hi = samples.min() - 3 * k.bandwidth, samples.max() + 3 * k.bandwidth
    g = np.linspace(lo, hi, n_grid)
    _write_table(path, ["x", "density"], np.column_stack([g, k.pdf(g)]))


def cmd_diagnose(ctx: RunContext) -> None:
    cfg = ctx.cfg
    rng = recipes.streams(cfg).derive(recipes.STREAM_DIAGNOSE)
    n_grid = cfg.diagnose.grid_points
    if cfg.model == "damage":
        data = recipes.damage_data(cfg)
        model = damage_model(cfg.synthetic().delta_eps)
        dom = [DistributionSpec.uniform(*b) for b in DAMAGE_BOX]
        X = lhs_sample(dom, rng, cfg.diagnose.n_srcc)
        design = {"source": "lhs on the uniform input box", "stream": recipes.STREAM_DIAGNOSE,
                  "seed": cfg.seed, "n": cfg.diagnose.n_srcc}
        rep = srcc(X, model(X))
        rep.to_csv(ctx.path("srcc.csv"), ["S", "s"], ["S_obs", "N_f"])
        _kde_csv(ctx.path("kde_tensile.csv"), data.tensile.data[0], n_grid)
        _kde_csv(ctx.path("kde_cyclic.csv"), data.cyclic.data[0], n_grid)
    else:
        model = recipes.toy_forward(cfg)
        X = recipes.toy_training_design(cfg)
        design = {"source": "surrogate training design", "stream": recipes.STREAM_SURROGATE,
                  "seed": cfg.seed, "n": cfg.surrogate.n_train}
        rep = srcc(X, model(X))
        rep.to_csv(ctx.path("srcc.csv"), recipes.TOY_NAMES)
        ens = recipes.toy_data(cfg)
        a, b = recipes.TOY_RESPONSE_PAIR
        if ens.n_z < b:
            raise DataError(f"curves have {ens.n_z} points; densities are drawn for y_{a} and y_{b}")
        _kde_csv(ctx.path(f"kde_y_{a}.csv"), ens.data[a - 1], n_grid)
        _kde_csv(ctx.path(f"kde_y_{b}.csv"), ens.data[b - 1], n_grid)
    chain_path = Path(cfg.diagnose.chain) if cfg.diagnose.chain else ctx.out / "chain_bayes.csv"
    if cfg.diagnose.chain or chain_path.exists():
        _diagnose_chain(ctx, chain_path)
    return {"srcc_design": design}


def _diagnose_chain(ctx: RunContext, path: Path) -> None:
    if not path.exists():
        raise FileNotFoundError(f"{path}: chain file not found")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise DataError(f"{path}: empty chain file")
    try:
        chain = Chain.from_csv(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    names = header[3:]
    d = diagnostics(chain, ctx.cfg.diagnose.checkpoints)
    _write_table(ctx.path("running_means.csv"), ["step", *names],
                 np.column_stack([d.checkpoints, d.running_means]))
    ctx.write_json("chain_diagnostics.json", {
        "acceptance_rate": d.acceptance_rate,
        "ess": dict(zip(names, d.ess.tolist())),
        "length": len(chain),
    })


def _read_first_block(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty table")
    block = []
    for r in rows:
        if not r:
            break
        block.append(r)
    return block[0], block[1:]


def cmd_compare(ctx: RunContext) -> None:
    tables = ctx.cfg.compare.get("tables") if ctx.cfg.compare else None
    if not tables or not isinstance(tables, dict):
        raise ConfigError("compare.tables: mapping of label -> comparison CSV path required")
    header = None
    out_rows = []
    for label, p in tables.items():
        h, rows = _read_first_block(Path(p))
        if header is None:
            header = h
        elif h != header:
            raise DataError(f"{p}: columns differ from the first table")
        out_rows += [[f"{label}/{r[0]}", *r[1:]] for r in rows]
    with open(ctx.path("comparison_joined.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(out_rows)


COMMANDS = {
    "generate": cmd_generate,
    "fit-surrogate": cmd_fit_surrogate,
    "infer": cmd_infer,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochinv", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for batch simulations")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed: must be an unsigned 64-bit integer")
        cfg = apply_overrides(load_config(args.config), args.seed, args.out)
        ctx = RunContext(cfg, args.command, args.threads)
        extra = COMMANDS[args.command](ctx)
        ctx.finish(extra if isinstance(extra, dict) else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERICAL_ERRORS as exc:
        print(f"numerical error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())
