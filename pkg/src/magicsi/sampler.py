"""Metropolis-within-Gibbs sampling on the selection constraint set.

One sweep updates, in order, the data part (a move along the conditioning
fiber), the active coefficients (a sign-preserving reflected random walk),
and the inactive subgradients (an exact Gibbs draw from the truncated
randomization law).  For the graphical model the data move is a sequence of
single-column rotations, and the coefficient/subgradient updates run for all
nodes at once with a separate accept decision per node.

Step sizes adapt during burn-in by a Robbins-Monro rule on the log scale and
are frozen afterwards, so the stored draws come from a fixed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArgumentError, SamplerInitError
from .state import ChainState

_ONE_MINUS = np.nextafter(1.0, 0.0)


@dataclass
class SamplerConfig:
    """Chain length and step-size settings.

    ``step_data`` is the Crank-Nicolson mixing weight for vector models
    (capped at 1) and the maximal rotation angle for column moves (capped
    at pi).  ``step_stat`` is the mixing weight of the separate move along
    the tested statistic's direction.  ``step_coef`` scales the
    preconditioned coefficient proposal.  ``stat_moves`` is the number of
    tested-direction moves per sweep (they are cheap and drive mixing of
    the recorded statistic); targets that support it follow each one with a
    joint statistic-and-coefficient move whose step is initialized from
    ``step_stat`` and adapted separately.  ``columns_per_sweep`` limits the generic
    column moves of the graphical sampler to a random subset per sweep
    (random-scan; ``None`` moves every column).
    """

    n_samples: int = 2000
    burn_in: int = 500
    thin: int = 1
    step_data: float = 0.5
    step_stat: float = 0.5
    step_coef: float = 1.0
    target_accept: float = 0.44
    target_accept_data: float = 0.234
    stat_moves: int = 3
    columns_per_sweep: int | None = None
    adapt: bool = True
    seed: int | None = None
    keep_states: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ArgumentError("n_samples must be positive")
        if self.burn_in < 0 or self.thin < 1:
            raise ArgumentError("burn_in must be >= 0 and thin >= 1")
        if self.stat_moves < 0:
            raise ArgumentError("stat_moves must be >= 0")
        if not (self.step_data > 0 and self.step_coef > 0 and self.step_stat > 0):
            raise ArgumentError("step sizes must be positive")
        for t in (self.target_accept, self.target_accept_data):
            if not 0 < t < 1:
                raise ArgumentError("target acceptance rates must lie in (0, 1)")


@dataclass
class SampleSet:
    """Draws of the tested statistic from one chain plus diagnostics."""

    stats: np.ndarray
    t_obs: float
    b_ref: float
    tilt_scale: float
    accept: dict = field(default_factory=dict)
    step_trace: dict = field(default_factory=dict)
    states: list | None = None
    skipped_moves: int = 0

    def __len__(self):
        return self.stats.shape[0]

    def ess(self) -> float:
        from .inference import effective_sample_size
        return effective_sample_size(self.stats)


def adapt_step(step, accepted, it, target, upper=None, exponent=0.6):
    """Robbins-Monro update ``log step += it^-exponent * (accepted - target)``."""
    new = step * np.exp(it ** (-exponent) * (float(accepted) - target))
    if upper is not None:
        new = min(new, upper)
    return new


# -- cached evaluations ------------------------------------------------------


def _log_target(target, state):
    v = state.cache.get("lt")
    if v is None:
        v = target.log_target(state)
        state.cache["lt"] = v
    return v


def _log_ref(target, state):
    v = state.cache.get("lr")
    if v is None:
        v = target.log_reference(state)
        state.cache["lr"] = v
    return v


def _metropolis(log_ratio, rng) -> bool:
    if log_ratio >= 0:
        return True
    if not np.isfinite(log_ratio):
        return False
    return bool(np.log(rng.random()) < log_ratio)


# -- vector models (linear, logistic) ---------------------------------------


def propose_data(target, state, a, rng, block=None):
    return target.propose_data(state, a, rng, block)


def log_accept_data(target, state, proposal) -> float:
    """Log MH ratio for a data move; antisymmetric in its two state arguments."""
    new = _log_target(target, proposal)
    if new == -np.inf:
        return -np.inf
    return (new - _log_ref(target, proposal)) - (_log_target(target, state) - _log_ref(target, state))


def step_data(target, state, a, rng, block=None):
    prop = propose_data(target, state, a, rng, block)
    if _metropolis(log_accept_data(target, state, prop), rng):
        return prop, True
    return state, False


def propose_coefficient(target, state, c, rng, precond=None):
    """``beta' = s * |beta + c D nu|`` with ``nu`` drawn from the randomization law."""
    ev = target.event
    k = ev.active.size
    nu = target.randomization.with_dim(k).sample(1, rng)[0] if k else np.zeros(0)
    D = np.ones(k) if precond is None else precond
    beta = ev.signs * np.abs(state.beta_E + c * D * nu)
    return state.replace(beta_E=beta)


def log_accept_coefficient(target, state, proposal) -> float:
    return _log_target(target, proposal) - _log_target(target, state)


def step_coefficient(target, state, c, rng, precond=None):
    if target.event.active.size == 0:
        return state, True
    prop = propose_coefficient(target, state, c, rng, precond)
    if _metropolis(log_accept_coefficient(target, state, prop), rng):
        return prop, True
    return state, False


def step_subgradient(target, state, rng):
    """Exact draw of ``z_{-E}`` given the rest; always accepted."""
    ev = target.event
    if ev.inactive.size == 0:
        return state
    offset = target.inactive_offset(state)
    lam = ev.lam
    dist = target.randomization.with_dim(offset.size)
    w = dist.sample_truncated(offset - lam, offset + lam, rng)
    z = np.clip((w - offset) / lam, -_ONE_MINUS, _ONE_MINUS)
    return state.replace(z_minus_E=z)


# -- graphical model --------------------------------------------------------


def step_column_sphere(target, state, c, theta, rng, toward=None):
    """Move column ``c`` on its fiber and accept by the density ratio.

    Returns ``(state', accepted, skipped)``; ``skipped`` is true when the
    fiber is degenerate and no move was attempted.
    """
    out = target.propose_column(state, c, theta, rng, toward)
    if out is None:
        return state, False, True
    prop, log_corr = out
    log_ratio = _log_target(target, prop) - _log_target(target, state) + log_corr
    if _metropolis(log_ratio, rng):
        return prop, True, False
    return state, False, False


def step_coefficient_graph(target, state, c, rng):
    """Reflected random walk on every node's active coefficients, per-node accept.

    Returns the new state and the per-node acceptance indicators of nodes
    with nonempty active sets.
    """
    m = target.model
    A = m.active_mask
    if not A.any():
        return state, np.zeros(0, bool)
    cache = target.pieces(state)
    G = cache["G"]
    cur = cache["node_lg"]
    nu = target.randomization.with_dim(int(A.sum())).sample(1, rng)[0]
    D = (m.n / 2.0) / np.diag(G)
    B = state.beta_E.copy()
    rows, cols = np.nonzero(A)
    B[rows, cols] = m.signs[rows, cols] * np.abs(B[rows, cols] + c * D[rows] * nu)
    # only the active entries of B changed; Omega moves by (2/n) G dB
    W = cache["W"] + (2.0 / m.n) * (G @ (B - state.beta_E))
    np.fill_diagonal(W, 0.0)
    new = m.node_log_g(W)
    has = A.any(0)
    u = np.log(rng.random(m.p))
    accept = has & (u < new - cur)
    if not accept.any():
        return state, accept[has]
    out = state.replace(beta_E=np.where(accept[None, :], B, state.beta_E))
    out.cache.update(G=G, node_ld=cache["node_ld"],
                     W=np.where(accept[None, :], W, cache["W"]),
                     node_lg=np.where(accept, new, cur))
    return out, accept[has]


def step_subgradient_graph(target, state, rng):
    m = target.model
    I = m.inactive_mask
    if not I.any():
        return state
    cache = target.pieces(state)
    W = cache["W"]
    off = W[I] - m.lam * state.z_minus_E[I]
    w = target.randomization.with_dim(off.size).sample_truncated(off - m.lam, off + m.lam, rng)
    Z = state.z_minus_E.copy()
    Z[I] = np.clip((w - off) / m.lam, -_ONE_MINUS, _ONE_MINUS)
    out = state.replace(z_minus_E=Z)
    W_new = W.copy()
    W_new[I] = off + m.lam * Z[I]
    out.cache.update(G=cache["G"], node_ld=cache["node_ld"], W=W_new,
                     node_lg=m.node_log_g(W_new))
    return out


# -- driver ------------------------------------------------------------------


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def run_chain(target, initial_state: ChainState, config: SamplerConfig, rng=None) -> SampleSet:
    """Run ``burn_in + n_samples * thin`` sweeps and record the tested statistic.

    Parameters
    ----------
    target
        A conditional target from :mod:`magicsi.models`.
    initial_state : ChainState
        Must satisfy the selection constraints (the observed solution does).
    config : SamplerConfig
    rng : numpy Generator, optional
        Defaults to ``default_rng(config.seed)``.
    """
    rng = _rng(config.seed) if rng is None else _rng(rng)
    state = initial_state
    if not np.isfinite(_log_target(target, state)):
        raise SamplerInitError("initial state has zero density")
    graph = getattr(target, "kind", "vector") == "graph"
    if graph:
        return _run_graph(target, state, config, rng)

    a, a_s, a_h, c = config.step_data, config.step_stat, config.step_stat, config.step_coef
    blocks = getattr(target, "data_blocks", ())
    split = "stat" in blocks
    shift = "shift" in blocks
    precond = target.coef_preconditioner() if target.event.active.size else None
    total = config.burn_in + config.n_samples * config.thin
    stats = np.empty(config.n_samples)
    states = [] if config.keep_states else None
    acc = {"data": 0, "stat": 0, "shift": 0, "coef": 0}
    trace = {"data": [], "stat": [], "shift": [], "coef": []}
    kept = it_s = 0
    for it in range(1, total + 1):
        burning = it <= config.burn_in
        if split:
            for _ in range(config.stat_moves):
                state, ok_s = step_data(target, state, a_s, rng, "stat")
                if burning and config.adapt:
                    it_s += 1
                    a_s = adapt_step(a_s, ok_s, it_s, config.target_accept, upper=1.0)
                elif not burning:
                    acc["stat"] += ok_s
                if shift:
                    state, ok_h = step_data(target, state, a_h, rng, "shift")
                    if burning and config.adapt:
                        a_h = adapt_step(a_h, ok_h, it_s, config.target_accept, upper=1.0)
                    elif not burning:
                        acc["shift"] += ok_h
        state, ok_d = step_data(target, state, a, rng, "rest" if split else None)
        state, ok_c = step_coefficient(target, state, c, rng, precond)
        state = step_subgradient(target, state, rng)
        if burning:
            if config.adapt:
                a = adapt_step(a, ok_d, it, config.target_accept_data, upper=1.0)
                c = adapt_step(c, ok_c, it, config.target_accept)
                trace["data"].append(a)
                trace["stat"].append(a_s)
                trace["shift"].append(a_h)
                trace["coef"].append(c)
            continue
        acc["data"] += ok_d
        acc["coef"] += ok_c
        if (it - config.burn_in) % config.thin == 0:
            stats[kept] = target.stat(state)
            if states is not None:
                states.append(state)
            kept += 1
    m = total - config.burn_in
    rates = {"data": acc["data"] / m, "coef": acc["coef"] / m}
    if split and config.stat_moves:
        rates["stat"] = acc["stat"] / (m * config.stat_moves)
        if shift:
            rates["shift"] = acc["shift"] / (m * config.stat_moves)
    steps = {k: np.array(v) for k, v in trace.items() if v or k != "shift"}
    steps.update(final_data=a, final_stat=a_s, final_coef=c)
    if shift:
        steps["final_shift"] = a_h
    return SampleSet(stats, target.t_obs, target.b_ref, target.tilt_scale,
                     accept=rates, step_trace=steps, states=states)


def _run_graph(target, state, config, rng):
    m = target.model
    i, j = target.edge
    theta = min(config.step_data, np.pi)
    theta_s = min(config.step_stat, np.pi)
    c = config.step_coef
    total = config.burn_in + config.n_samples * config.thin
    stats = np.empty(config.n_samples)
    states = [] if config.keep_states else None
    count = {"column": [0, 0], "stat": [0, 0], "coef": [0, 0]}
    skipped = 0
    it_col = it_stat = it_coef = 0
    trace = {"column": [], "stat": [], "coef": []}
    kept = 0
    for it in range(1, total + 1):
        burning = it <= config.burn_in
        tune = burning and config.adapt
        for _ in range(config.stat_moves):
            for col, partner in ((i, j), (j, i)):
                state, ok, skip = step_column_sphere(target, state, col, theta_s, rng, partner)
                if skip:
                    skipped += 1
                elif tune:
                    it_stat += 1
                    theta_s = adapt_step(theta_s, ok, it_stat, config.target_accept, upper=np.pi)
                elif not burning:
                    count["stat"][0] += 1
                    count["stat"][1] += ok
        cols = range(m.p) if not config.columns_per_sweep else rng.choice(
            m.p, min(config.columns_per_sweep, m.p), replace=False)
        for col in cols:
            state, ok, skip = step_column_sphere(target, state, col, theta, rng)
            if skip:
                skipped += 1
            elif tune:
                it_col += 1
                theta = adapt_step(theta, ok, it_col, config.target_accept_data, upper=np.pi)
            elif not burning:
                count["column"][0] += 1
                count["column"][1] += ok
        state, acc = step_coefficient_graph(target, state, c, rng)
        if acc.size:
            if tune:
                it_coef += 1
                c = adapt_step(c, acc.mean(), it_coef, config.target_accept)
            elif not burning:
                count["coef"][0] += acc.size
                count["coef"][1] += int(acc.sum())
        state = step_subgradient_graph(target, state, rng)
        if burning:
            trace["column"].append(theta)
            trace["stat"].append(theta_s)
            trace["coef"].append(c)
            continue
        if (it - config.burn_in) % config.thin == 0:
            stats[kept] = target.stat(state)
            if states is not None:
                states.append(state)
            kept += 1
    rates = {k: v[1] / max(v[0], 1) for k, v in count.items()}
    steps = {k: np.array(v) for k, v in trace.items()}
    steps.update(final_column=theta, final_stat=theta_s, final_coef=c)
    return SampleSet(stats, target.t_obs, target.b_ref, target.tilt_scale, accept=rates,
                     step_trace=steps, states=states, skipped_moves=skipped)
