"""Simulation settings, data generators, and replication loops.

Signal strength
    Lasso: columns of ``X`` have unit norm and the ``s`` nonzero coefficients
    share one value chosen so that ``||X b||_2 / (sigma sqrt(n)) = snr``.
    Logistic: the nonzero coefficients equal
    ``2 snr / sqrt(n)`` with ``x_i ~ N(0, I)``, so the score
    ``x_j^T (y - 1/2)`` of each true coefficient has a mean of about ``snr``
    null standard deviations.

Penalty level
    ``lam = kappa * E||score noise||_inf`` estimated by Monte Carlo under the
    global null, with ``kappa`` part of the setting.

Replications are indexed; replication ``r`` uses child ``r`` of the master
``SeedSequence``.  Loops that need a number of *qualifying* replications
(e.g. the selected set covers the true support) run in batches and keep the
first qualifying ones in index order, so results do not depend on the
number of workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .exceptions import ArgumentError, MagicError
from .inference import ks_uniformity, power_estimate
from .pipeline import (child_seed, fit_neighborhoods, infer_graph, infer_lasso,
                       infer_logistic, omega_seed)
from .randomization import RandomizationDist
from .sampler import SamplerConfig
from .solver import Logistic, ProgramSpec, SquaredError, solve_randomized

# values reported in the literature for the power study, kept as annotations
REFERENCE_POWER = {"randomized": 0.887, "nonrandomized": 0.176}
REFERENCE_SELECTION = {"randomized": 0.852, "nonrandomized": 0.91}


@dataclass
class LassoSetting:
    n: int = 50
    p: int = 100
    s: int = 7
    snr: float = 7.0
    sigma: float = 1.0
    kappa: float = 1.0
    rand_family: str = "laplace"
    rand_scale: float = 1.0
    ridge_eps: float = 0.2
    fixed_design_seed: int | None = 0


@dataclass
class LogisticSetting:
    n: int = 500
    p: int = 50
    s: int = 5
    snr: float = 7.0
    kappa: float = 1.1
    rand_family: str = "laplace"
    rand_scale: float = 0.5
    ridge_eps: float = 0.02


@dataclass
class GraphSetting:
    n: int = 100
    p: int = 30
    rho: float = 0.245
    edge_fraction: float = 0.01
    kappa: float = 0.9
    rand_family: str = "laplace"
    rand_scale: float = 0.1


def _check_positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ArgumentError(f"{k} must be positive")


# -- generators --------------------------------------------------------------


def lasso_design(n, p, rng):
    X = rng.standard_normal((n, p))
    return X / np.linalg.norm(X, axis=0)


def simulate_lasso(setting: LassoSetting, rng, X=None):
    """Return ``X, y, b`` with ``y ~ N(X b, sigma^2 I)``."""
    st = setting
    _check_positive(n=st.n, p=st.p, sigma=st.sigma)
    if X is None:
        X = lasso_design(st.n, st.p, rng)
    b = np.zeros(st.p)
    b[:st.s] = 1.0
    b *= st.snr * st.sigma * np.sqrt(st.n) / np.linalg.norm(X @ b)
    y = X @ b + st.sigma * rng.standard_normal(st.n)
    return X, y, b


def simulate_logistic(setting: LogisticSetting, rng):
    st = setting
    _check_positive(n=st.n, p=st.p)
    X = rng.standard_normal((st.n, st.p))
    b = np.zeros(st.p)
    b[:st.s] = 2.0 * st.snr / np.sqrt(st.n)
    y = (rng.random(st.n) < expit(X @ b)).astype(float)
    return X, y, b


def sparse_precision(p, rho, edge_fraction, rng):
    """Unit-diagonal precision with ``round(edge_fraction * p(p-1)/2)`` entries ``rho``."""
    iu = np.triu_indices(p, 1)
    k = max(1, int(round(edge_fraction * iu[0].size)))
    for _ in range(100):
        pick = rng.choice(iu[0].size, k, replace=False)
        Theta = np.eye(p)
        Theta[iu[0][pick], iu[1][pick]] = rho
        Theta[iu[1][pick], iu[0][pick]] = rho
        if np.linalg.eigvalsh(Theta).min() > 0:
            edges = sorted((int(iu[0][q]), int(iu[1][q])) for q in pick)
            return Theta, edges
    raise ArgumentError("could not draw a positive definite precision matrix")


def simulate_graph(setting: GraphSetting, rng):
    st = setting
    Theta, edges = sparse_precision(st.p, st.rho, st.edge_fraction, rng)
    L = np.linalg.cholesky(np.linalg.inv(Theta))
    X = rng.standard_normal((st.n, st.p)) @ L.T
    return X, Theta, edges


# -- penalty levels ----------------------------------------------------------


def lasso_lambda(X, sigma, kappa, rng, n_mc=1000):
    """``kappa * E||X^T eps||_inf`` with ``eps ~ N(0, sigma^2 I)``."""
    eps = sigma * rng.standard_normal((n_mc, X.shape[0]))
    return float(kappa * np.abs(eps @ X).max(1).mean())


def logistic_lambda(X, kappa, rng, n_mc=1000):
    """``kappa * E||X^T (y - 1/2)||_inf / sqrt(n)`` with fair coin responses."""
    n = X.shape[0]
    y = rng.random((n_mc, n)) < 0.5
    return float(kappa * np.abs((y - 0.5) @ X).max(1).mean() / np.sqrt(n))


def graph_lambda(n, p, kappa, rng, n_mc=200):
    """``kappa * E max_k ||(2/n) X_{-k}^T x_k||_inf`` averaged over nodes, ``X`` white."""
    vals = []
    for _ in range(n_mc):
        X = rng.standard_normal((n, p))
        G = (2.0 / n) * np.abs(X.T @ X)
        np.fill_diagonal(G, 0.0)
        vals.append(G.max(0).mean())
    return float(kappa * np.mean(vals))


def mb_lambda(X, alpha=0.05):
    """Neighborhood-selection penalty ``(2 sigma_hat / sqrt(n)) Phi^{-1}(1 - alpha / (2 p^2))``.

    ``sigma_hat`` is the largest column standard deviation.  The rule comes
    from Meinshausen and Buhlmann (2006), rescaled to the ``1/n`` loss.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    sigma_hat = np.sqrt((X ** 2).mean(0)).max()
    return float(2 * sigma_hat / np.sqrt(n) * norm.isf(alpha / (2 * p * p)))


def make_randomization(family, scale, dim):
    return RandomizationDist(family, scale, dim)


# -- replications -------------------------------------------------------------


def _null_choice(rng, candidates):
    if not candidates:
        return None
    return int(candidates[rng.integers(len(candidates))])


def _root(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def lasso_replication(setting: LassoSetting, sampler: SamplerConfig, seed, mode="null",
                      level=0.9, all_nulls=False):
    """One Lasso replication.

    ``mode="null"`` tests one randomly chosen selected null coordinate (all
    of them with ``all_nulls``); ``mode="coverage"`` builds a ``level``
    interval for one randomly chosen selected coordinate; ``mode="power"``
    tests every true coordinate.
    """
    root = _root(seed)
    data_seq, pick_seq, inf_seq = (child_seed(root, k) for k in range(3))
    X = None
    if setting.fixed_design_seed is not None:
        X = lasso_design(setting.n, setting.p, np.random.default_rng(setting.fixed_design_seed))
    X, y, b = simulate_lasso(setting, np.random.default_rng(data_seq), X)
    lam = lasso_lambda(X, setting.sigma, setting.kappa, np.random.default_rng(1))
    G = make_randomization(setting.rand_family, setting.rand_scale, setting.p)
    omega = G.sample(1, np.random.default_rng(omega_seed(inf_seq)))[0]
    sol = solve_randomized(ProgramSpec(SquaredError(X, y), lam, omega, setting.ridge_eps))
    try:
        out = _run_and_collect(
            lambda variables, pv, ci: infer_lasso(
                X, y, setting.sigma ** 2, lam, G, setting.ridge_eps, sampler, inf_seq,
                level=level, variables=variables, pvalues=pv, intervals=ci, omega=omega),
            sol.active.tolist(), b, mode, np.random.default_rng(pick_seq), all_nulls)
    except MagicError as exc:
        # e.g. |E| >= n leaves no room to move the tested coordinate
        out = _failed(sol.active.tolist(), b, exc)
    out["lam"] = lam
    return out


def _failed(active, b, exc):
    covers = set(np.flatnonzero(b).tolist()).issubset(active)
    return {"active": active, "covers_support": covers, "null_pvalues": [],
            "alt_pvalues": [], "intervals": [], "error": str(exc)}


def _run_and_collect(run, active, b, mode, rng, all_nulls):
    support = set(np.flatnonzero(b).tolist())
    covers = support.issubset(active)
    rec = {"active": active, "covers_support": covers, "null_pvalues": [],
           "alt_pvalues": [], "intervals": []}
    if not active or not covers:
        return rec
    nulls = [j for j in active if j not in support]
    if mode == "null":
        chosen = nulls if all_nulls else [v for v in [_null_choice(rng, nulls)] if v is not None]
        if not chosen:
            return rec
        rep = run(chosen, True, False)
        rec["null_pvalues"] = [r.p_value for r in rep.results]
        rec["tested"] = chosen
    elif mode == "power":
        rep = run(sorted(support), True, False)
        rec["alt_pvalues"] = [r.p_value for r in rep.results]
        rec["tested"] = sorted(support)
    elif mode == "coverage":
        j = int(active[rng.integers(len(active))])
        rep = run([j], False, True)
        r = rep.results[0]
        rec["intervals"] = [{"variable": j, "truth": float(b[j]), "lower": r.ci[0],
                             "upper": r.ci[1], "estimate": r.estimate}]
        rec["tested"] = [j]
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    return rec


def logistic_replication(setting: LogisticSetting, sampler: SamplerConfig, seed, mode="null",
                         level=0.9, all_nulls=False):
    root = _root(seed)
    data_seq, pick_seq, inf_seq = (child_seed(root, k) for k in range(3))
    X, y, b = simulate_logistic(setting, np.random.default_rng(data_seq))
    lam = logistic_lambda(X, setting.kappa, np.random.default_rng(1))
    G = make_randomization(setting.rand_family, setting.rand_scale, setting.p)
    omega = G.sample(1, np.random.default_rng(omega_seed(inf_seq)))[0]
    sol = solve_randomized(ProgramSpec(Logistic(X, y), lam, omega, setting.ridge_eps))
    try:
        out = _run_and_collect(
            lambda variables, pv, ci: infer_logistic(
                X, y, lam, G, setting.ridge_eps, sampler, inf_seq, level=level,
                variables=variables, pvalues=pv, intervals=ci, omega=omega),
            sol.active.tolist(), b, mode, np.random.default_rng(pick_seq), all_nulls)
    except MagicError as exc:
        # e.g. separation in the refit; recorded and left without p-values
        out = _failed(sol.active.tolist(), b, exc)
    out["lam"] = lam
    return out


def graph_replication(setting: GraphSetting, sampler: SamplerConfig, seed, mode="null",
                      all_nulls=False):
    root = _root(seed)
    data_seq, pick_seq, inf_seq = (child_seed(root, k) for k in range(3))
    X, Theta, true_edges = simulate_graph(setting, np.random.default_rng(data_seq))
    lam = graph_lambda(setting.n, setting.p, setting.kappa, np.random.default_rng(1))
    G = make_randomization(setting.rand_family, setting.rand_scale, setting.p - 1)
    fits = fit_neighborhoods(X, lam, G, np.random.default_rng(omega_seed(inf_seq)))
    selected = fits.events.edges
    covers = set(true_edges).issubset(selected)
    rec = {"active": [list(e) for e in selected], "covers_support": covers,
           "null_pvalues": [], "alt_pvalues": [], "intervals": [], "lam": lam}
    if not covers:
        return rec
    truth = set(true_edges)
    nulls = [e for e in selected if e not in truth]
    if mode == "power":
        chosen = list(true_edges)
    elif all_nulls:
        chosen = nulls
    else:
        pick = np.random.default_rng(pick_seq)
        chosen = [nulls[pick.integers(len(nulls))]] if nulls else []
    if not chosen:
        return rec
    rep = infer_graph(X, lam, G, sampler, inf_seq, edges=chosen, omega=fits.omega)
    key = "alt_pvalues" if mode == "power" else "null_pvalues"
    rec[key] = [r.p_value for r in rep.results]
    rec["tested"] = [list(e) for e in chosen]
    return rec


REPLICATIONS = {"lasso": lasso_replication, "logistic": logistic_replication,
                "graph": graph_replication}


def _call(args):
    fn, setting, sampler, seq, kwargs = args
    return fn(setting, sampler, seq, **kwargs)


def run_replications(problem, setting, sampler, master_seed, n_reps=None, keep=None,
                     qualify=None, max_reps=None, workers=1, batch=None, **kwargs):
    """Run indexed replications, optionally until ``keep`` of them qualify.

    Parameters
    ----------
    problem : {"lasso", "logistic", "graph"}
    n_reps : int
        Run exactly this many replications (when ``keep`` is None).
    keep : int
        Stop once this many replications satisfy ``qualify`` (a predicate on
        the replication record); at most ``max_reps`` are run.
    workers : int
        Process pool size; results do not depend on it.

    Returns
    -------
    list of dict
        Records in index order, each with its ``index``.  When ``keep`` is
        given, records after the ``keep``-th qualifying one are dropped.
    """
    fn = REPLICATIONS[problem]
    root = np.random.SeedSequence(master_seed)
    if keep is None:
        if not n_reps or n_reps < 1:
            raise ArgumentError("n_reps must be positive")
        max_reps = n_reps
    else:
        if qualify is None:
            raise ArgumentError("qualify predicate required with keep")
        max_reps = max_reps or 20 * keep
    batch = batch or max(workers * 4, 8)
    records = []
    n_ok = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        start = 0
        while start < max_reps:
            stop = min(max_reps, start + (batch if keep is not None else max_reps))
            seqs = [child_seed(root, r) for r in range(start, stop)]
            args = [(fn, setting, sampler, s, kwargs) for s in seqs]
            out = list(pool.map(_call, args)) if pool else [_call(a) for a in args]
            for r, rec in zip(range(start, stop), out):
                rec["index"] = r
                records.append(rec)
                if keep is not None and qualify(rec):
                    n_ok += 1
                    if n_ok == keep:
                        return records
            start = stop
    finally:
        if pool:
            pool.shutdown()
    return records


def summarize_null(records, level=0.05):
    p = [q for r in records for q in r["null_pvalues"]]
    out = {"n_replications": len(records),
           "n_selected_covering": sum(r["covers_support"] for r in records),
           "n_null_pvalues": len(p)}
    if len(p) >= 2:
        ks, ks_p = ks_uniformity(p)
        out.update(ks_stat=ks, ks_pvalue=ks_p, rejection_rate=power_estimate(p, level))
    return out


def summarize_power(records, level=0.05):
    p = [q for r in records for q in r["alt_pvalues"]]
    out = {"n_replications": len(records),
           "n_selected_covering": sum(r["covers_support"] for r in records),
           "selection_proportion": float(np.mean([r["covers_support"] for r in records])),
           "n_alt_pvalues": len(p),
           "reference_power": REFERENCE_POWER,
           "reference_selection_proportion": REFERENCE_SELECTION}
    if p:
        out["power"] = power_estimate(p, level)
    return out


def summarize_coverage(records):
    iv = [i for r in records for i in r["intervals"]]
    cover = [i["lower"] <= i["truth"] <= i["upper"] for i in iv]
    return {"n_replications": len(records), "n_intervals": len(iv),
            "coverage": float(np.mean(cover)) if cover else float("nan"),
            "median_length": float(np.median([i["upper"] - i["lower"] for i in iv]))
            if iv else float("nan")}


def setting_dict(setting):
    return asdict(setting)


__all__ = ["LassoSetting", "LogisticSetting", "GraphSetting", "run_replications",
           "summarize_null", "summarize_power", "summarize_coverage", "mb_lambda",
           "simulate_lasso", "simulate_logistic", "simulate_graph", "sparse_precision",
           "lasso_lambda", "logistic_lambda", "graph_lambda"]
