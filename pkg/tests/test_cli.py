import json
import math
from pathlib import Path

import numpy as np
import pytest

from magicsi import __version__
from magicsi.cli import main, resolve_config
from magicsi.exceptions import ConfigError

from instances import chain_precision

DATA = Path(__file__).parent / "data"
FAST = '{"n_samples": 300, "burn_in": 100}'


def write_csv(path, arr):
    np.savetxt(path, np.atleast_1d(arr), delimiter=",", fmt="%.17g")
    return str(path)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def lasso_files(tmp_path, n=30, p=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = X[:, 0] * 2 + rng.standard_normal(n)
    return write_csv(tmp_path / "X.csv", X), write_csv(tmp_path / "y.csv", y)


def run(args, capsys=None):
    code = main([str(a) for a in args])
    return code


def read_bytes(out):
    return {f.name: f.read_bytes() for f in sorted(Path(out).iterdir())}


def test_empty_selection_report(tmp_path, capsys):
    X, y = lasso_files(tmp_path, n=10, p=3)
    cfg = write_config(tmp_path / "c.json", {"design": X, "response": y, "sigma2": 1.0,
                                              "lam": 1e6})
    assert run(["infer", "--config", cfg, "--out", tmp_path / "o"]) == 0
    assert "no selection, nothing to infer" in capsys.readouterr().out
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["active"] == [] and rep["results"] == []
    assert (tmp_path / "o" / "pvalues.csv").read_text().strip().count("\n") == 0


@pytest.mark.invariant
def test_infer_reports_byte_identical(tmp_path):
    X, y = lasso_files(tmp_path)
    cfg = write_config(tmp_path / "c.json", {"design": X, "response": y, "sigma2": 1.0,
                                              "lam": 3.0, "sampler": json.loads(FAST)})
    assert run(["infer", "--config", cfg, "--seed", 5, "--out", tmp_path / "a"]) == 0
    assert run(["infer", "--config", cfg, "--seed", 5, "--out", tmp_path / "b",
                "--workers", 2]) == 0
    a, b = read_bytes(tmp_path / "a"), read_bytes(tmp_path / "b")
    assert set(a) == {"report.json", "pvalues.csv", "intervals.csv"}
    assert a == b
    assert json.loads(a["report.json"])["results"]


@pytest.mark.invariant
def test_config_round_trip_from_report(tmp_path):
    X, y = lasso_files(tmp_path)
    cfg = write_config(tmp_path / "c.json", {"design": X, "response": y, "sigma2": 1.0,
                                              "lam": 3.0, "intervals": False})
    assert run(["infer", "--config", cfg, "--seed", 9, "--out", tmp_path / "a",
                "--set", f"sampler={FAST}"]) == 0
    report = tmp_path / "a" / "report.json"
    embedded = json.loads(report.read_text())["config"]
    assert embedded["seed"] == 9 and embedded["sampler"]["n_samples"] == 300
    assert run(["infer", "--config", report, "--out", tmp_path / "b"]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


@pytest.mark.invariant
def test_simulate_round_trip_and_reproducible(tmp_path):
    args = ["simulate-null", "--seed", 3, "--set", "reps=3",
            "--set", 'setting={"n": 20, "p": 10, "s": 2, "snr": 5.0, "ridge_eps": 0.0}',
            "--set", f"sampler={FAST}"]
    assert run(args + ["--out", tmp_path / "a"]) == 0
    assert run(args + ["--out", tmp_path / "b", "--workers", 2]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")
    assert run(["simulate-null", "--config", tmp_path / "a" / "report.json",
                "--out", tmp_path / "c"]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "c")


def test_golden_report(tmp_path, monkeypatch):
    monkeypatch.chdir(DATA)
    assert run(["infer", "--config", "golden_config.json", "--out", tmp_path]) == 0
    golden = DATA / "golden"
    for name in ("pvalues.csv", "intervals.csv"):
        assert (tmp_path / name).read_text() == (golden / name).read_text()
    got = json.loads((tmp_path / "report.json").read_text())
    want = json.loads((golden / "report.json").read_text())
    got.pop("version"), want.pop("version")
    assert got == want


def test_simulate_null_outputs(tmp_path):
    assert run(["simulate-null", "--out", tmp_path, "--set", "reps=4",
                "--set", 'setting={"n": 20, "p": 10, "s": 2, "snr": 5.0, "ridge_eps": 0.0}',
                "--set", f"sampler={FAST}"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["summary"]["n_qualifying"] == 4
    m = rep["summary"]["n_null_pvalues"]
    rows = np.loadtxt(tmp_path / "ecdf.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (m, 2)
    assert np.all(np.diff(rows[:, 0]) >= 0)
    assert np.allclose(rows[:, 1], np.arange(1, m + 1) / m)
    pv = np.loadtxt(tmp_path / "pvalues.csv", delimiter=",", skiprows=1, ndmin=2)
    assert np.allclose(np.sort(pv[:, 2]), rows[:, 0])


def test_simulate_power_annotations(tmp_path):
    assert run(["simulate-power", "--out", tmp_path, "--set", "reps=1",
                "--set", "setting.n=200", "--set", "setting.p=8", "--set", "setting.s=2",
                "--set", f"sampler={FAST}"]) == 0
    s = json.loads((tmp_path / "report.json").read_text())["summary"]
    assert s["reference_power"] == {"randomized": 0.887, "nonrandomized": 0.176}
    assert 0 <= s["selection_proportion"] <= 1


def test_simulate_coverage_intervals(tmp_path):
    assert run(["simulate-coverage", "--out", tmp_path, "--set", "reps=2",
                "--set", 'setting={"n": 20, "p": 10, "s": 2, "snr": 5.0, "ridge_eps": 0.0}',
                "--set", f"sampler={FAST}"]) == 0
    rows = (tmp_path / "intervals.csv").read_text().strip().splitlines()
    assert rows[0] == "replication,variable,truth,estimate,lower,upper"
    assert len(rows) == 3


def test_graph_infer_identity_is_empty(tmp_path, capsys):
    X = np.random.default_rng(0).standard_normal((100, 5))
    cfg = write_config(tmp_path / "c.json", {"data": write_csv(tmp_path / "X.csv", X),
                                              "lam": 5.0})
    assert run(["graph-infer", "--config", cfg, "--out", tmp_path / "o"]) == 0
    assert "no selection" in capsys.readouterr().out
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["edges"] == [] and rep["adjacency"] == [[None] * 5] * 5


@pytest.mark.invariant
def test_graph_infer_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.multivariate_normal(np.zeros(4), np.linalg.inv(chain_precision(4, 0.4)), 80)
    cfg = write_config(tmp_path / "c.json", {
        "data": write_csv(tmp_path / "X.csv", X), "lam": 0.3,
        "sampler": {"n_samples": 200, "burn_in": 50, "columns_per_sweep": 2}})
    assert run(["graph-infer", "--config", cfg, "--seed", 4, "--out", tmp_path / "a"]) == 0
    assert run(["graph-infer", "--config", cfg, "--seed", 4, "--out", tmp_path / "b"]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["edges"]
    for r in rep["results"]:
        i, j = r["variable"]
        assert rep["adjacency"][i][j] == rep["adjacency"][j][i] == r["p_value"]


@pytest.mark.invariant
def test_chain_graph_null_edges_sub_uniform(tmp_path):
    assert run(["simulate-null", "--out", tmp_path, "--seed", 3, "--set", "problem=graph",
                "--set", 'setting={"n": 100, "p": 3, "rho": 0.4, "edge_fraction": 0.67}',
                "--set", "reps=100",
                "--set", 'sampler={"n_samples": 500, "burn_in": 200, "columns_per_sweep": 2}'
                ]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    p = np.array([q for r in rep["replications"] for q in r["null_pvalues"]])
    assert p.size == 100
    for alpha in (0.05, 0.1, 0.2):
        assert np.mean(p <= alpha) <= alpha + 2 * math.sqrt(alpha * (1 - alpha) / p.size)


def test_exit_code_config_errors(tmp_path, capsys):
    X, y = lasso_files(tmp_path)
    base = {"design": X, "response": y, "sigma2": 1.0, "lam": 3.0, "intervals": False}
    cases = [{"bogus": 1}, {"seed": -1}, {"sampler": {"steps": 3}},
             {"problem": "graph"}, {"randomization": {"scale": -1.0}},
             {"randomization": {"family": "cauchy", "scale": 1.0}}]
    for k, extra in enumerate(cases):
        cfg = write_config(tmp_path / f"c{k}.json", {**base, **extra})
        assert run(["infer", "--config", cfg, "--out", tmp_path / "o"]) == 2, extra
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["error"]
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["infer", "--config", tmp_path / "bad.json"]) == 2
    assert run(["infer", "--config", tmp_path / "missing.json"]) == 2
    assert run(["infer", "--set", "oops", "--out", tmp_path / "o"]) == 2
    assert run(["simulate-null", "--set", "reps=0", "--out", tmp_path / "o"]) == 2
    assert run(["infer", "--workers", 0, "--out", tmp_path / "o"]) == 2


def test_exit_code_data_errors(tmp_path):
    X, y = lasso_files(tmp_path)
    short = write_csv(tmp_path / "short.csv", np.ones(5))
    nan = tmp_path / "nan.csv"
    nan.write_text("1,2\nnan,3\n")
    text = tmp_path / "text.csv"
    text.write_text("a,b\n")
    cases = [{"design": str(tmp_path / "none.csv"), "response": y},
             {"design": X, "response": short}, {"design": str(nan), "response": y},
             {"design": str(text), "response": y},
             {"design": X, "response": y, "problem": "logistic"}]
    for k, extra in enumerate(cases):
        cfg = write_config(tmp_path / f"c{k}.json", {"sigma2": 1.0, "lam": 3.0, **extra})
        assert run(["infer", "--config", cfg, "--out", tmp_path / "o"]) == 3, extra
    cfg = write_config(tmp_path / "g.json", {"data": write_csv(tmp_path / "two.csv",
                                                                np.ones((5, 2)))})
    assert run(["graph-infer", "--config", cfg, "--out", tmp_path / "o"]) == 3


def test_exit_code_numerical_failure(tmp_path, capsys):
    rng = np.random.default_rng(14)
    cfg = write_config(tmp_path / "c.json", {
        "design": write_csv(tmp_path / "X.csv", rng.standard_normal((5, 20))),
        "response": write_csv(tmp_path / "y.csv", rng.standard_normal(5)),
        "sigma2": 1.0, "lam": 0.01, "ridge_eps": 0,
        "randomization": {"family": "gaussian", "scale": 5.0}})
    assert run(["infer", "--config", cfg, "--out", tmp_path / "o"]) == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConvergenceError" and "ridge_eps" in err["message"]


def test_sigma2_estimated_when_missing(tmp_path):
    X, y = lasso_files(tmp_path)
    cfg = write_config(tmp_path / "c.json", {"design": X, "response": y, "lam": 3.0,
                                              "intervals": False, "sampler": json.loads(FAST)})
    assert run(["infer", "--config", cfg, "--out", tmp_path / "o"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["diagnostics"]["sigma2_estimated"] > 0


def test_resolve_config_precedence(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"seed": 1, "sampler": {"n_samples": 10}})
    out = resolve_config("infer", cfg, seed=4, overrides=["sampler.burn_in=3", "level=0.8"])
    assert out["seed"] == 4 and out["level"] == 0.8
    assert out["sampler"] == {"n_samples": 10, "burn_in": 3}
    with pytest.raises(ConfigError):
        resolve_config("infer", overrides=["nope=1"])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == __version__
