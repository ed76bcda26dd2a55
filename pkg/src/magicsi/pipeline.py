"""End-to-end selective inference: randomize, select, sample, invert.

Seeds are derived from one master ``SeedSequence``: the first child draws
the randomization, and each tested variable gets its own child from which
every chain for that variable is spawned in a fixed order.  Results are
therefore reproducible and independent of how variables are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ArgumentError, GridTooCoarseError
from .inference import (InferenceResult, effective_sample_size, mc_standard_error,
                        selective_ci, selective_pvalue)
from .models import (GaussianLinearModel, GraphicalModel, LinearTarget, LogisticModel,
                     NodeEvents)
from .randomization import RandomizationDist
from .sampler import SamplerConfig, run_chain
from .state import ChainState
from .solver import (Logistic, NodeRegression, ProgramSpec, SelectionEvent, SquaredError,
                     solve_randomized)

# half-width of the initial confidence-interval grid, in unselected standard errors
CI_HALF_WIDTH = 8.0
CI_GRID_POINTS = 321
MIN_TILTED_ESS = 100.0
MAX_EXTRA_CHAINS = 4


@dataclass
class SelectionReport:
    """Selection and per-variable inference for one data set."""

    problem: str
    active: list
    signs: list
    results: list = field(default_factory=list)
    omega: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def selected(self) -> bool:
        return len(self.active) > 0


def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seed(seq, k: int) -> np.random.SeedSequence:
    """The ``k``-th child of ``seq``, computed without advancing its spawn counter."""
    seq = _seed_sequence(seq)
    return np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (k,),
                                  pool_size=seq.pool_size)


def omega_seed(seed):
    """Seed used to draw the randomization inside the ``infer_*`` functions."""
    return child_seed(seed, 0)


def _chain(target, state, config, seed_seq):
    cfg = replace(config, seed=None)
    return run_chain(target, state, cfg, np.random.default_rng(seed_seq))


def _confidence_interval(make_target, make_state, center, sd, config, seeds, level):
    """Tilted inversion around ``center`` with extra reference chains as needed.

    ``seeds`` is an iterator of seed sequences; one is consumed per chain.
    """
    t0 = make_target(center)
    sets = [_chain(t0, make_state(t0), config, next(seeds))]
    half = CI_HALF_WIDTH
    diag = {}
    for _ in range(MAX_EXTRA_CHAINS + 1):
        grid = center + sd * np.linspace(-half, half, CI_GRID_POINTS)
        try:
            (lo, hi), diag = selective_ci(sets, level, grid)
        except GridTooCoarseError as exc:
            diag = exc.diagnostics
            lo = hi = None
        if lo is None:
            new_refs = [float(grid[np.argmax(diag["p"])])]
        else:
            new_refs = []
            for end in (lo, hi):
                i = int(np.argmin(np.abs(grid - end)))
                if diag["ess"][i] < MIN_TILTED_ESS:
                    new_refs.append(end)
            if diag.get("edge_hit"):
                half *= 2
        if not new_refs and lo is not None and not diag.get("edge_hit"):
            break
        if len(sets) > MAX_EXTRA_CHAINS:
            break
        for b in new_refs:
            t = make_target(b)
            sets.append(_chain(t, make_state(t), config, next(seeds)))
    if lo is None:
        raise GridTooCoarseError("confidence interval is empty on the grid", diag)
    i_lo = int(np.argmin(np.abs(grid - lo)))
    i_hi = int(np.argmin(np.abs(grid - hi)))
    info = {"reference_chains": len(sets),
            "endpoint_ess": [float(diag["ess"][i_lo]), float(diag["ess"][i_hi])],
            "edge_hit": bool(diag.get("edge_hit", False))}
    return (lo, hi), info


def _seed_stream(seq):
    k = 0
    while True:
        yield child_seed(seq, k)
        k += 1


def _infer_variable(make_target, make_state, variable, estimate, sd, config, seq,
                    level, alternative, want_p, want_ci):
    seeds = _seed_stream(seq)
    p = np.nan
    ess = np.nan
    diag = {}
    if want_p:
        t = make_target(0.0)
        ss = _chain(t, make_state(t), config, next(seeds))
        p = selective_pvalue(ss, alternative=alternative)
        ess = effective_sample_size(ss.stats)
        diag["accept"] = ss.accept
        diag["t_obs"] = ss.t_obs
    ci = None
    if want_ci:
        ci, info = _confidence_interval(make_target, make_state, estimate, sd, config,
                                        seeds, level)
        diag["ci"] = info
    if not want_p:
        return InferenceResult(variable, np.nan, ci, 0.0, np.nan, estimate, diag)
    return InferenceResult(variable, p, ci, ess, mc_standard_error(p, ess), estimate, diag)


def _check_variables(variables, active):
    if variables is None:
        return list(active)
    bad = [v for v in variables if v not in set(active)]
    if bad:
        raise ArgumentError(f"variables {bad} are not in the active set")
    return list(variables)


def infer_lasso(X, y, sigma2, lam, randomization: RandomizationDist, ridge_eps=0.0,
                sampler: SamplerConfig | None = None, seed=None, level=0.9, variables=None,
                alternative="two_sided", pvalues=True, intervals=True, omega=None,
                tol=1e-10) -> SelectionReport:
    """Randomized Lasso selection followed by selective tests and intervals.

    ``omega`` may be supplied (otherwise it is drawn); ``variables`` restricts
    inference to a subset of the active set.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    config = sampler or SamplerConfig()
    var_seq = child_seed(seed, 1)
    if omega is None:
        omega = randomization.sample(1, np.random.default_rng(omega_seed(seed)))[0]
    spec = ProgramSpec(SquaredError(X, y), lam, omega, ridge_eps)
    sol = solve_randomized(spec, tol=tol)
    ev = SelectionEvent.from_solution(spec, sol)
    report = SelectionReport("lasso", ev.active.tolist(), ev.signs.tolist(), omega=omega)
    if not ev.active.size:
        return report
    model = GaussianLinearModel(X, sigma2, ev, randomization)
    est, se = model.unselected_estimate(y)
    beta0, z0 = sol.beta_hat[ev.active], sol.z_hat[ev.inactive]
    targets = _check_variables(variables, ev.active.tolist())
    children = [child_seed(var_seq, k) for k in range(ev.active.size)]
    pos = {j: k for k, j in enumerate(ev.active.tolist())}
    for j in targets:
        k = pos[j]
        suff = model.sufficient_stat(y, j)

        def make_target(b, suff=suff):
            return LinearTarget(model, suff, b)

        def make_state(t):
            return t.initial_state(y, beta0, z0)

        report.results.append(_infer_variable(
            make_target, make_state, j, float(est[k]), float(se[k]), config, children[k],
            level, alternative, pvalues, intervals))
    return report


def infer_logistic(X, y, lam, randomization: RandomizationDist, ridge_eps=0.02,
                   sampler: SamplerConfig | None = None, seed=None, level=0.9,
                   variables=None, alternative="two_sided", pvalues=True, intervals=True,
                   omega=None, one_step=False, tol=1e-10) -> SelectionReport:
    """Randomized l1-logistic selection followed by selective inference on ``b_E``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    config = sampler or SamplerConfig()
    var_seq = child_seed(seed, 1)
    if omega is None:
        omega = randomization.sample(1, np.random.default_rng(omega_seed(seed)))[0]
    spec = ProgramSpec(Logistic(X, y), lam, omega, ridge_eps)
    sol = solve_randomized(spec, tol=tol)
    ev = SelectionEvent.from_solution(spec, sol)
    report = SelectionReport("logistic", ev.active.tolist(), ev.signs.tolist(), omega=omega)
    if not ev.active.size:
        return report
    model = LogisticModel(X, y, ev, randomization, one_step=one_step,
                          beta_hat_E=sol.beta_hat[ev.active])
    est, se = model.unselected_estimate()
    beta0, z0 = sol.beta_hat[ev.active], sol.z_hat[ev.inactive]
    report.diagnostics["taylor_omega_gap"] = float(np.abs(
        model.omega(_logistic_observed(model, beta0, z0)) - omega).max())
    targets = _check_variables(variables, ev.active.tolist())
    children = [child_seed(var_seq, k) for k in range(ev.active.size)]
    pos = {j: k for k, j in enumerate(ev.active.tolist())}
    for j in targets:
        k = pos[j]

        def make_target(b, j=j):
            return model.conditional(j, b)

        def make_state(t):
            return t.initial_state(beta0, z0)

        report.results.append(_infer_variable(
            make_target, make_state, j, float(est[k]), float(se[k]), config, children[k],
            level, alternative, pvalues, intervals))
    return report


def _logistic_observed(model, beta0, z0):
    return ChainState(model.T_obs, beta0, z0)


@dataclass
class NodeFits:
    """Per-node randomized solutions stacked into ``p x p`` matrices."""

    events: NodeEvents
    B: np.ndarray
    Z: np.ndarray
    omega: np.ndarray


def fit_neighborhoods(X, lam, randomization: RandomizationDist, rng=None, omega=None,
                      tol=1e-10) -> NodeFits:
    """Solve the ``p`` randomized node regressions.

    ``omega`` (``p x p``, column ``k`` for node ``k``, diagonal ignored) is
    drawn column by column from ``randomization`` when not supplied.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if randomization.dim != p - 1:
        raise ArgumentError(f"randomization must have dim {p - 1}")
    if omega is None:
        rng = np.random.default_rng(rng)
        draws = randomization.sample(p, rng)
        omega = np.zeros((p, p))
        for k in range(p):
            omega[np.arange(p) != k, k] = draws[k]
    events, B, Z = [], np.zeros((p, p)), np.zeros((p, p))
    for k in range(p):
        loss = NodeRegression(X, k)
        spec = ProgramSpec(loss, lam, omega[loss.others, k])
        sol = solve_randomized(spec, tol=tol)
        events.append(SelectionEvent.from_solution(spec, sol))
        B[loss.others, k] = sol.beta_hat
        Z[loss.others, k] = sol.z_hat
    return NodeFits(NodeEvents.from_events(events), B, Z, omega)


def infer_graph(X, lam, randomization: RandomizationDist, sampler: SamplerConfig | None = None,
                seed=None, edges=None, alternative="two_sided", omega=None,
                tol=1e-10) -> SelectionReport:
    """Neighborhood selection with randomization, then a selective test per edge."""
    X = np.asarray(X, dtype=float)
    config = sampler or SamplerConfig()
    edge_seq = child_seed(seed, 1)
    fits = fit_neighborhoods(X, lam, randomization, np.random.default_rng(omega_seed(seed)),
                             omega, tol)
    all_edges = fits.events.edges
    report = SelectionReport("graph", [list(e) for e in all_edges], [], omega=fits.omega)
    report.diagnostics["node_active"] = [a.tolist() for a in fits.events.active]
    if not all_edges:
        return report
    model = GraphicalModel(X, fits.events, randomization)
    wanted = all_edges if edges is None else [tuple(sorted(e)) for e in edges]
    children = [child_seed(edge_seq, k) for k in range(len(all_edges))]
    pos = {e: k for k, e in enumerate(all_edges)}
    for e in wanted:
        if e not in pos:
            raise ArgumentError(f"edge {e} was not selected")
        target = model.conditional(e, 0.0)
        state = target.initial_state(fits.B, fits.Z)
        ss = _chain(target, state, config, children[pos[e]])
        p = selective_pvalue(ss, alternative=alternative)
        ess = effective_sample_size(ss.stats)
        report.results.append(InferenceResult(
            list(e), p, None, ess, mc_standard_error(p, ess), ss.t_obs,
            {"accept": ss.accept, "skipped_moves": ss.skipped_moves}))
    return report


__all__ = ["SelectionReport", "infer_lasso", "infer_logistic", "infer_graph",
           "fit_neighborhoods", "NodeFits", "child_seed", "omega_seed"]
