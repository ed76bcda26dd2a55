"""Command-line interface.

``magic infer|simulate-null|simulate-power|simulate-coverage|graph-infer``
reads a JSON config, applies flag overrides, runs, and writes ``report.json``
plus CSV tables to ``--out``.  The report embeds the resolved config so a run
can be repeated from the report alone.  Execution-only settings (``--out``,
``--workers``) are not part of the config and do not change any output.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError, DataError, MagicError
from .inference import ecdf_points
from .pipeline import infer_graph, infer_lasso, infer_logistic
from .randomization import RandomizationDist
from .sampler import SamplerConfig
from .simulate import (GraphSetting, LassoSetting, LogisticSetting, graph_lambda,
                       lasso_lambda, logistic_lambda, run_replications, summarize_coverage,
                       summarize_null, summarize_power)

SETTINGS = {"lasso": LassoSetting, "logistic": LogisticSetting, "graph": GraphSetting}

DEFAULTS = {
    "infer": {
        "problem": "lasso", "design": None, "response": None, "sigma2": None,
        "lam": None, "kappa": 1.0, "ridge_eps": None,
        "randomization": {"family": "laplace", "scale": 1.0},
        "sampler": {}, "level": 0.9, "alternative": "two_sided", "intervals": True,
        "variables": None, "seed": 0,
    },
    "graph-infer": {
        "data": None, "lam": None, "kappa": 0.9,
        "randomization": {"family": "laplace", "scale": 0.1},
        "sampler": {"columns_per_sweep": 6}, "alternative": "two_sided", "edges": None,
        "seed": 0,
    },
    "simulate-null": {
        "problem": "lasso", "setting": {}, "reps": 100, "max_reps": None,
        "sampler": {}, "level": 0.05, "seed": 0,
    },
    "simulate-power": {
        "problem": "logistic",
        "setting": {"rand_family": "gaussian", "rand_scale": math.sqrt(0.1), "kappa": 1.1},
        "reps": 200, "max_reps": None, "sampler": {}, "level": 0.05, "seed": 0,
    },
    "simulate-coverage": {
        "problem": "lasso", "setting": {}, "reps": 200, "max_reps": None,
        "sampler": {}, "level": 0.9, "seed": 0,
    },
}

RIDGE_DEFAULT = {"lasso": 0.0, "logistic": 0.02}


# -- config --------------------------------------------------------------------


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command, config_path=None, seed=None, overrides=()):
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS[command])
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        # a report's embedded config is accepted as input
        loaded = loaded.get("config", loaded) if "config" in loaded and "command" in loaded \
            else loaded
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val))
    if seed is not None:
        cfg["seed"] = seed
    unknown = set(cfg) - set(DEFAULTS[command])
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _sampler(cfg):
    allowed = {f.name for f in fields(SamplerConfig)} - {"seed", "keep_states"}
    bad = set(cfg["sampler"]) - allowed
    if bad:
        raise ConfigError(f"unknown sampler keys: {sorted(bad)}")
    return SamplerConfig(**cfg["sampler"])


def _randomization(cfg, dim):
    r = cfg["randomization"]
    try:
        return RandomizationDist(r["family"], float(r["scale"]), dim)
    except (KeyError, TypeError) as exc:
        raise ConfigError("randomization needs 'family' and 'scale'") from exc


def _setting(cfg):
    cls = SETTINGS.get(cfg["problem"])
    if cls is None:
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    allowed = {f.name for f in fields(cls)}
    bad = set(cfg["setting"]) - allowed
    if bad:
        raise ConfigError(f"unknown setting keys for {cfg['problem']}: {sorted(bad)}")
    return cls(**cfg["setting"])


def _seed(cfg):
    s = cfg["seed"]
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError("seed must be a non-negative integer")
    return s


# -- data ----------------------------------------------------------------------


def read_matrix(path, ndim=2):
    """Read a headerless numeric CSV."""
    if path is None:
        raise ConfigError("a data path is required")
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if arr.size == 0:
        raise DataError(f"{path} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path} contains non-finite values")
    if ndim == 1:
        if 1 not in arr.shape:
            raise DataError(f"{path} must hold a single column or row")
        arr = arr.ravel()
    return arr


# -- output --------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, payload):
    text = json.dumps(_clean(payload), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return v


def _result_dict(r):
    return {"variable": r.variable, "p_value": r.p_value,
            "ci": list(r.ci) if r.ci is not None else None,
            "n_effective_draws": r.n_effective_draws, "mc_se": r.mc_se,
            "estimate": r.estimate, "diagnostics": r.diagnostics}


# -- commands ------------------------------------------------------------------


def cmd_infer(cfg, out):
    problem = cfg["problem"]
    if problem not in ("lasso", "logistic"):
        raise ConfigError("infer handles problem 'lasso' or 'logistic'; use graph-infer")
    X = read_matrix(cfg["design"])
    y = read_matrix(cfg["response"], ndim=1)
    n, p = X.shape
    if y.size != n:
        raise DataError(f"response has {y.size} entries, design has {n} rows")
    seed = _seed(cfg)
    sampler = _sampler(cfg)
    G = _randomization(cfg, p)
    eps = RIDGE_DEFAULT[problem] if cfg["ridge_eps"] is None else float(cfg["ridge_eps"])
    info = {}
    if problem == "lasso":
        sigma2 = cfg["sigma2"]
        if sigma2 is None:
            if n <= p + 1:
                raise ConfigError("sigma2 is required when n <= p + 1")
            resid = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
            sigma2 = float(resid @ resid / (n - p))
            info["sigma2_estimated"] = sigma2
        lam = cfg["lam"]
        if lam is None:
            lam = lasso_lambda(X, math.sqrt(sigma2), cfg["kappa"], np.random.default_rng(1))
        rep = infer_lasso(X, y, float(sigma2), float(lam), G, eps, sampler, seed,
                          level=cfg["level"], variables=cfg["variables"],
                          alternative=cfg["alternative"], intervals=bool(cfg["intervals"]))
    else:
        if not np.all((y == 0) | (y == 1)):
            raise DataError("logistic responses must be 0 or 1")
        lam = cfg["lam"]
        if lam is None:
            lam = logistic_lambda(X, cfg["kappa"], np.random.default_rng(1))
        rep = infer_logistic(X, y, float(lam), G, eps, sampler, seed, level=cfg["level"],
                             variables=cfg["variables"], alternative=cfg["alternative"],
                             intervals=bool(cfg["intervals"]))
    info["lam"] = float(lam)
    info["ridge_eps"] = eps
    report = {"command": "infer", "config": cfg, "version": __version__,
              "active": rep.active, "signs": rep.signs,
              "results": [_result_dict(r) for r in rep.results],
              "diagnostics": {**rep.diagnostics, **info}}
    if not rep.active:
        report["message"] = "no selection, nothing to infer"
    _write_json(out / "report.json", report)
    _write_csv(out / "pvalues.csv", ["variable", "p_value", "n_effective_draws", "mc_se"],
               [(r.variable, r.p_value, r.n_effective_draws, r.mc_se) for r in rep.results])
    _write_csv(out / "intervals.csv", ["variable", "estimate", "lower", "upper"],
               [(r.variable, r.estimate, *(r.ci if r.ci else (math.nan, math.nan)))
                for r in rep.results])
    return report


def cmd_graph_infer(cfg, out):
    X = read_matrix(cfg["data"])
    n, p = X.shape
    if p < 3:
        raise DataError("graph inference needs at least 3 variables")
    seed = _seed(cfg)
    sampler = _sampler(cfg)
    G = _randomization(cfg, p - 1)
    lam = cfg["lam"]
    if lam is None:
        lam = graph_lambda(n, p, cfg["kappa"], np.random.default_rng(1))
    rep = infer_graph(X, float(lam), G, sampler, seed, edges=cfg["edges"],
                      alternative=cfg["alternative"])
    report = {"command": "graph-infer", "config": cfg, "version": __version__,
              "edges": rep.active, "results": [_result_dict(r) for r in rep.results],
              "adjacency": _adjacency(p, rep),
              "diagnostics": {**rep.diagnostics, "lam": float(lam)}}
    if not rep.active:
        report["message"] = "no selection, nothing to infer"
    _write_json(out / "report.json", report)
    _write_csv(out / "pvalues.csv", ["i", "j", "p_value", "n_effective_draws", "mc_se"],
               [(*r.variable, r.p_value, r.n_effective_draws, r.mc_se) for r in rep.results])
    return report


def _adjacency(p, rep):
    """``p x p`` matrix of edge p-values; ``None`` where no edge was tested."""
    A = [[None] * p for _ in range(p)]
    for r in rep.results:
        i, j = r.variable
        A[i][j] = A[j][i] = r.p_value
    return A


def _simulate(cfg, out, workers, mode):
    setting = _setting(cfg)
    sampler = _sampler(cfg)
    seed = _seed(cfg)
    reps = cfg["reps"]
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("reps must be a positive integer")
    key = {"null": "null_pvalues", "power": "alt_pvalues", "coverage": "intervals"}[mode]
    kwargs = {"mode": mode}
    if mode == "coverage":
        kwargs["level"] = cfg["level"]
    records = run_replications(cfg["problem"], setting, sampler, seed, keep=reps,
                               qualify=lambda r: len(r[key]) > 0,
                               max_reps=cfg["max_reps"], workers=workers, **kwargs)
    report = {"command": f"simulate-{mode}", "config": cfg, "version": __version__,
              "setting": asdict(setting), "replications": records}
    if mode == "null":
        report["summary"] = summarize_null(records, cfg["level"])
    elif mode == "power":
        report["summary"] = summarize_power(records, cfg["level"])
    else:
        report["summary"] = summarize_coverage(records)
    report["summary"]["n_qualifying"] = sum(len(r[key]) > 0 for r in records)
    _write_json(out / "report.json", report)
    if mode == "coverage":
        _write_csv(out / "intervals.csv",
                   ["replication", "variable", "truth", "estimate", "lower", "upper"],
                   [(r["index"], i["variable"], i["truth"], i["estimate"], i["lower"],
                     i["upper"]) for r in records for i in r["intervals"]])
        return report
    rows = [(r["index"], _label(v), q) for r in records
            for v, q in zip(r.get("tested", []), r[key])]
    _write_csv(out / "pvalues.csv", ["replication", "variable", "p_value"], rows)
    pts, heights = ecdf_points([q for _, _, q in rows]) if rows else ([], [])
    _write_csv(out / "ecdf.csv", ["p_value", "ecdf"], list(zip(pts, heights)))
    return report


def _label(v):
    return "-".join(map(str, v)) if isinstance(v, (list, tuple)) else v


COMMANDS = {
    "infer": lambda cfg, out, workers: cmd_infer(cfg, out),
    "graph-infer": lambda cfg, out, workers: cmd_graph_infer(cfg, out),
    "simulate-null": lambda cfg, out, workers: _simulate(cfg, out, workers, "null"),
    "simulate-power": lambda cfg, out, workers: _simulate(cfg, out, workers, "power"),
    "simulate-coverage": lambda cfg, out, workers: _simulate(cfg, out, workers, "coverage"),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="magic", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (a previous report.json also works)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="process pool size")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry; dotted keys reach nested "
                             "entries and values are parsed as JSON when possible")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = resolve_config(args.command, args.config, args.seed, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = COMMANDS[args.command](cfg, out, args.workers)
    except MagicError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc), "exit_code": 3}),
              file=sys.stderr)
        return 3
    print(report.get("message", f"wrote {out / 'report.json'}"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
