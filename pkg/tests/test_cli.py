import csv
import json
import subprocess
import sys

import pytest
import yaml

from stochinv.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, run, sha256

FAST_CHAIN = {"steps": 1000, "burn_in": 0.2, "band": [0.2, 0.5], "window": 200, "max_rounds": 50}


def damage_cfg(tmp_path, **extra):
    cfg = {
        "experiment": "damage-smoke",
        "model": "damage",
        "formulation": "both",
        "seed": 7,
        "output": str(tmp_path / "out"),
        "mcmc": {"bayes": dict(FAST_CHAIN), "transform": dict(FAST_CHAIN, steps=2000)},
        "transform": {"n_sim": 500, "rounds": 0},
        "predictive": {"n_sim": 500, "epistemic_draws": 3, "epistemic_n_sim": 100},
        "diagnose": {"n_srcc": 500, "checkpoints": 10, "grid_points": 21},
    }
    cfg.update(extra)
    return cfg


def toy_cfg(tmp_path, **extra):
    cfg = {
        "experiment": "toy-smoke",
        "model": "toy",
        "formulation": "both",
        "seed": 11,
        "output": str(tmp_path / "out"),
        "data": {"synthetic": {"n": 16, "n_t": 40, "t_end": 60.0, "sigma": 0.01}},  # too short for y_220
        "surrogate": {"degree": 3, "n_train": 300, "cv_degrees": [1, 2, 3], "k_folds": 3, "n_cv": 200},
        "mcmc": {"bayes": dict(FAST_CHAIN), "transform": dict(FAST_CHAIN)},
        "predictive": {"n_sim": 200},
        "diagnose": {"checkpoints": 10, "grid_points": 21},
    }
    cfg.update(extra)
    return cfg


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(out, command):
    return json.loads((out / f"manifest_{command}.json").read_text())


def test_generate_damage(tmp_path):
    assert run(["generate", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_OK
    out = tmp_path / "out"
    for name in ("tensile.csv", "cyclic.csv", "tensile_provenance.csv", "cyclic_provenance.csv"):
        assert (out / name).exists()
    # two provenance tables: one row per specimen after the header, 50 + 30 in total
    rows = sum(len(read_csv(out / f)) - 1 for f in ("tensile_provenance.csv", "cyclic_provenance.csv"))
    assert rows == 80
    m = manifest(out, "generate")
    assert m["seed"] == 7 and m["command"] == "generate"
    for rel, digest in m["files"].items():
        assert sha256(out / rel) == digest
    assert (out / "resolved_config.yaml").exists()


def test_generate_is_byte_identical_on_rerun(tmp_path):
    cfg = damage_cfg(tmp_path)
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run(["generate", "--config", write_cfg(tmp_path, cfg), "--out", str(a)]) == EXIT_OK
    assert run(["generate", "--config", write_cfg(tmp_path, cfg), "--out", str(b)]) == EXIT_OK
    for name in ("tensile.csv", "cyclic.csv", "tensile_provenance.csv", "cyclic_provenance.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert manifest(a, "generate")["files"]["cyclic.csv"] == manifest(b, "generate")["files"]["cyclic.csv"]


def test_generate_toy_shape(tmp_path):
    cfg = toy_cfg(tmp_path, data={"synthetic": {"n": 16, "n_t": 568, "t_end": 60.0, "sigma": 0.01}})
    assert run(["generate", "--config", write_cfg(tmp_path, cfg)]) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "curves.csv")
    assert len(rows) == 1 + 568
    assert all(len(r) == 16 for r in rows[1:])


def test_seed_flag_changes_data(tmp_path):
    cfg = write_cfg(tmp_path, damage_cfg(tmp_path))
    run(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
    run(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
    assert (tmp_path / "a" / "cyclic.csv").read_bytes() != (tmp_path / "b" / "cyclic.csv").read_bytes()
    assert manifest(tmp_path / "b", "generate")["seed"] == 8


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("STOCHINV_SEED", "99")
    monkeypatch.setenv("STOCHINV_OUT", str(tmp_path / "env"))
    assert run(["generate", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_OK
    assert manifest(tmp_path / "env", "generate")["seed"] == 99
    # explicit flags win over the environment
    assert run(["generate", "--config", write_cfg(tmp_path, damage_cfg(tmp_path)), "--seed", "3"]) == EXIT_OK
    assert manifest(tmp_path / "env", "generate")["seed"] == 3


def test_fit_surrogate_records_selected_degree(tmp_path):
    assert run(["fit-surrogate", "--config", write_cfg(tmp_path, toy_cfg(tmp_path))]) == EXIT_OK
    out = tmp_path / "out"
    m = manifest(out, "fit-surrogate")
    assert m["cv_selected_degree"] in (1, 2, 3)
    assert m["fitted_degree"] == 3
    rows = read_csv(out / "cv_scores.csv")
    assert rows[0] == ["degree", "basis_size", "cv_rmse", "relative_cv_rmse"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert json.loads((out / "surrogate.json").read_text())["degree"] == 3


def test_fit_surrogate_too_few_samples(tmp_path, capsys):
    cfg = toy_cfg(tmp_path, surrogate={"degree": 8, "n_train": 100, "cv_degrees": []})
    assert run(["fit-surrogate", "--config", write_cfg(tmp_path, cfg)]) == EXIT_NUMERICAL
    assert "need at least 3003" in capsys.readouterr().err


def test_fit_surrogate_rejects_damage(tmp_path, capsys):
    assert run(["fit-surrogate", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_CONFIG
    assert "model" in capsys.readouterr().err


def test_infer_bayes_smoke(tmp_path):
    cfg = damage_cfg(tmp_path, formulation="bayes")
    assert run(["infer", "--config", write_cfg(tmp_path, cfg)]) == EXIT_OK
    out = tmp_path / "out"
    summary = json.loads((out / "summary_bayes.json").read_text())
    assert set(summary["ess"]) == {"alpha_S", "beta_S", "alpha_s", "beta_s", "rho"}
    assert summary["chain"]["length"] == 1000
    header = read_csv(out / "chain_bayes.csv")[0]
    assert header[:3] == ["step", "logp", "accepted"] and len(header) == 3 + 5
    table = read_csv(out / "comparison.csv")
    assert [r[0] for r in table[1:3]] == ["Data", "Bayes"]


def test_infer_both_and_determinism(tmp_path):
    cfg = damage_cfg(tmp_path)
    path = write_cfg(tmp_path, cfg)
    assert run(["infer", "--config", path, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert run(["infer", "--config", path, "--out", str(tmp_path / "b")]) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "comparison.csv")
    assert [r[0] for r in rows[1:4]] == ["Data", "Bayes", "Transf."]
    fa = manifest(tmp_path / "a", "infer")["files"]
    fb = manifest(tmp_path / "b", "infer")["files"]
    for name in ("comparison.csv", "chain_bayes.csv", "samples_transform.csv", "summary_transform.json"):
        assert fa[name] == fb[name]
    assert read_csv(tmp_path / "a" / "samples_transform.csv")[0] == ["S", "s", "logp"]


def test_toy_pipeline(tmp_path):
    full = {"synthetic": {"n": 16, "n_t": 568, "t_end": 60.0, "sigma": 0.01}}
    path = write_cfg(tmp_path, toy_cfg(tmp_path, data=full))
    assert run(["fit-surrogate", "--config", path]) == EXIT_OK
    assert run(["infer", "--config", path]) == EXIT_OK
    assert run(["diagnose", "--config", path]) == EXIT_OK
    out = tmp_path / "out"
    srcc_rows = read_csv(out / "srcc.csv")
    assert srcc_rows[6][0] == "x6"
    assert max(abs(float(v)) for v in srcc_rows[6][1:]) < 0.2
    table = read_csv(out / "comparison.csv")
    assert table[0][1:3] == ["mean_y_200", "mean_y_220"]
    running = read_csv(out / "running_means.csv")
    assert len(running) == 1 + 10
    assert manifest(out, "diagnose")["srcc_design"]["n"] == 300


def test_diagnose_damage_outputs(tmp_path):
    assert run(["diagnose", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_OK
    out = tmp_path / "out"
    assert read_csv(out / "srcc.csv")[0] == ["parameter", "S_obs", "N_f"]
    assert len(read_csv(out / "kde_cyclic.csv")) == 1 + 21
    assert not (out / "running_means.csv").exists()


def test_diagnose_empty_chain_is_data_error(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    cfg = damage_cfg(tmp_path, diagnose={"n_srcc": 100, "chain": str(empty)})
    assert run(["diagnose", "--config", write_cfg(tmp_path, cfg)]) == EXIT_DATA
    assert "empty" in capsys.readouterr().err


def test_missing_chain_is_io_error(tmp_path):
    cfg = damage_cfg(tmp_path, diagnose={"n_srcc": 100, "chain": str(tmp_path / "nope.csv")})
    assert run(["diagnose", "--config", write_cfg(tmp_path, cfg)]) == EXIT_IO


def test_missing_config_file_is_io_error(tmp_path):
    assert run(["generate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO


@pytest.mark.parametrize("bad,field", [
    ({"model": "beam"}, "model"),
    ({"formulation": "neither"}, "formulation"),
    ({"seed": -1}, "seed"),
    ({"mcmc": {"bayes": {"burn_in": 1.5}}}, "mcmc.bayes.burn_in"),
    ({"surprise": 1}, "surprise"),
    ({"transform": {"n_sim": 5}}, "transform.n_sim"),
])
def test_schema_errors_name_the_field(tmp_path, capsys, bad, field):
    cfg = damage_cfg(tmp_path, **bad)
    assert run(["generate", "--config", write_cfg(tmp_path, cfg)]) == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_bad_environment_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("STOCHINV_SEED", "abc")
    assert run(["generate", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_CONFIG


def test_data_paths_missing_file_is_data_error(tmp_path, capsys):
    cfg = damage_cfg(tmp_path, data={"paths": {"tensile": str(tmp_path / "t.csv")}})
    assert run(["infer", "--config", write_cfg(tmp_path, cfg)]) == EXIT_DATA
    assert "cyclic" in capsys.readouterr().err


def test_infer_from_generated_files(tmp_path):
    gen = write_cfg(tmp_path, damage_cfg(tmp_path, output=str(tmp_path / "gen")), "gen.yaml")
    assert run(["generate", "--config", gen]) == EXIT_OK
    g = tmp_path / "gen"
    paths = {k: str(g / f"{k}.csv") for k in ("tensile", "cyclic")}
    paths.update({f"{k}_provenance": str(g / f"{k}_provenance.csv") for k in ("tensile", "cyclic")})
    a = write_cfg(tmp_path, damage_cfg(tmp_path, formulation="transform", output=str(tmp_path / "a")), "a.yaml")
    b = write_cfg(tmp_path, damage_cfg(tmp_path, formulation="transform", output=str(tmp_path / "b"),
                                       data={"paths": paths}), "b.yaml")
    assert run(["infer", "--config", a]) == EXIT_OK
    assert run(["infer", "--config", b]) == EXIT_OK
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()


def test_compare_joins_tables(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("row,mean\nData,1.0\nBayes,2.0\n\nrow,MAE\nBayes,0.1\n")
    b.write_text("row,mean\nData,1.5\n")
    cfg = damage_cfg(tmp_path, compare={"tables": {"first": str(a), "second": str(b)}})
    assert run(["compare", "--config", write_cfg(tmp_path, cfg)]) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "comparison_joined.csv")
    assert rows == [["row", "mean"], ["first/Data", "1.0"], ["first/Bayes", "2.0"], ["second/Data", "1.5"]]


def test_compare_mismatched_columns(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("row,mean\nData,1.0\n")
    b.write_text("row,std\nData,1.5\n")
    cfg = damage_cfg(tmp_path, compare={"tables": {"a": str(a), "b": str(b)}})
    assert run(["compare", "--config", write_cfg(tmp_path, cfg)]) == EXIT_DATA
    assert run(["compare", "--config", write_cfg(tmp_path, damage_cfg(tmp_path))]) == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stochinv", "generate", "--config",
                           write_cfg(tmp_path, damage_cfg(tmp_path))], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "stochinv", "generate", "--config",
                          str(tmp_path / "none.yaml")], capture_output=True, text=True)
    assert bad.returncode == EXIT_IO


def test_missing_data_file_is_io_error(tmp_path):
    paths = {"tensile": str(tmp_path / "t.csv"), "cyclic": str(tmp_path / "c.csv")}
    cfg = damage_cfg(tmp_path, formulation="transform", data={"paths": paths})
    assert run(["infer", "--config", write_cfg(tmp_path, cfg)]) == EXIT_IO


def test_short_toy_curves_rejected_for_comparison(tmp_path, capsys):
    path = write_cfg(tmp_path, toy_cfg(tmp_path, formulation="transform"))
    assert run(["infer", "--config", path]) == EXIT_DATA
    assert "y_220" in capsys.readouterr().err
