r"""Selective densities for the three data models.

Each model pairs a data law with the randomization density evaluated at the
reconstructed ``omega``.  For a tested coordinate ``j`` the model produces a
*conditional target*: the law of ``(data, beta_E, z_{-E})`` restricted to the
selection constraints and to the fiber on which the sufficient statistics of
the nuisance parameters are held at their observed values.  Targets expose
the pieces the sampler needs:

``log_target(state)``
    Log density up to a constant, ``-inf`` outside the constraint set.
``log_reference(state)``
    Log density of the law the data proposal is reversible for.  The data
    move is accepted with ``exp`` of the difference of the two.
``propose_data(state, a, rng)``
    A move of the data part along the conditioning fiber.
``stat(state)``
    The tested sufficient statistic ``T_j``.

All targets carry a reference parameter ``b_ref`` for the tested coordinate;
draws at ``b_ref`` can be tilted to any other value by the weight
``exp((b - b_ref) * tilt_scale * T_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .exceptions import (ArgumentError, ModelFitError,
                         SamplerInitError, SingularSelectionError)
from .randomization import RandomizationDist
from .solver import (Logistic, NodeRegression, SelectionEvent, SquaredError,
                     check_constraints, logdet_checked)
from .state import ChainState


def _check_randomization(randomization, dim):
    if randomization.dim != dim:
        raise ArgumentError(f"randomization has dim {randomization.dim}, expected {dim}")


def _inside(event: SelectionEvent, state: ChainState) -> bool:
    return check_constraints(event, state.beta_E, state.z_minus_E, strict=True)


def _orthonormal_basis(A):
    """Orthonormal basis of ``col(A)``; raises if ``A`` is rank deficient."""
    if A.shape[1] == 0:
        return np.zeros((A.shape[0], 0))
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * max(d.max(), 1.0):
        raise SingularSelectionError("selected columns are rank deficient")
    return Q


@dataclass(frozen=True)
class SufficientStat:
    """Tested statistic, nuisance statistics, and the held data component.

    ``held`` is the conditioned part of the data (for the linear model the
    projection ``P y`` onto the span of the other selected columns).  Moves
    only touch the complement, so ``T_rest`` computed from ``held`` is the
    same floating point number at every step of a chain.
    """

    j: int
    T_j: float
    T_rest: np.ndarray
    held: np.ndarray


# ---------------------------------------------------------------------------
# Gaussian linear model
# ---------------------------------------------------------------------------


class GaussianLinearModel:
    r"""``y ~ N(X_E b_E, sigma2 I)`` after a randomized Lasso selected ``E``.

    Parameters
    ----------
    X : (n, p) array
    sigma2 : float
        Known noise variance.
    event : SelectionEvent
        Must come from a :class:`~magicsi.solver.SquaredError` program on ``X``.
    randomization : RandomizationDist
        The law of ``omega`` (dimension ``p``).
    b_E : array, optional
        Mean parameter on ``E``; zero by default.
    """

    def __init__(self, X, sigma2, event: SelectionEvent, randomization: RandomizationDist,
                 b_E=None):
        self.X = np.asarray(X, dtype=float)
        if not sigma2 > 0:
            raise ArgumentError("sigma2 must be positive")
        if not isinstance(event.loss, SquaredError):
            raise ArgumentError("event does not come from a squared-error program")
        self.sigma2 = float(sigma2)
        self.event = event
        self.randomization = randomization
        n, p = self.X.shape
        _check_randomization(randomization, p)
        E = event.active
        self.XE = self.X[:, E]
        if E.size:
            _orthonormal_basis(self.XE)
        self.b_E = np.zeros(E.size) if b_E is None else np.asarray(b_E, dtype=float)
        # d omega / d beta_E
        self.XtXE = self.X.T @ self.XE
        self.XtXE[E, np.arange(E.size)] += event.ridge_eps
        self._lamz_E = np.zeros(p)
        self._lamz_E[E] = event.lam * event.signs

    def omega(self, state: ChainState) -> np.ndarray:
        ev = self.event
        w = self.XtXE @ state.beta_E - self.X.T @ state.data + self._lamz_E
        w[ev.inactive] += ev.lam * state.z_minus_E
        return w

    def inactive_offset(self, state):
        """``(omega - lam z)_{-E}``, the part of ``omega_{-E}`` not involving ``z``."""
        return (self.XtXE @ state.beta_E - self.X.T @ state.data)[self.event.inactive]

    def log_gaussian(self, y, b_E=None) -> float:
        b = self.b_E if b_E is None else b_E
        r = y - self.XE @ b
        return -0.5 * (r @ r) / self.sigma2

    def log_density(self, state: ChainState) -> float:
        """Selective log density of ``(y, beta_E, z_{-E})`` up to a constant.

        The Jacobian is omitted: it does not depend on the state when ``X``
        is fixed.  States outside the constraint set get ``-inf``.
        """
        if not _inside(self.event, state):
            return -np.inf
        return self.log_gaussian(state.data) + self.randomization.log_density(self.omega(state))

    def jacobian_logdet(self) -> float:
        ev = self.event
        H = self.XE.T @ self.XE + ev.ridge_eps * np.eye(ev.active.size)
        return logdet_checked(H) + (ev.p - ev.active.size) * np.log(ev.lam)

    def coef_preconditioner(self):
        return 1.0 / np.diag(self.XtXE[self.event.active])

    def sufficient_stat(self, y, j: int) -> SufficientStat:
        E = list(self.event.active)
        if j not in E:
            raise ArgumentError(f"variable {j} is not in the active set")
        rest = [k for k in E if k != j]
        Q = _orthonormal_basis(self.X[:, rest])
        y = np.asarray(y, dtype=float)
        held = Q @ (Q.T @ y)
        return SufficientStat(j, float(self.X[:, j] @ y), self.X[:, rest].T @ held, held)

    def unselected_estimate(self, y):
        """Least squares on ``X_E`` and the standard errors ignoring selection."""
        coef, *_ = np.linalg.lstsq(self.XE, y, rcond=None)
        cov = self.sigma2 * np.linalg.inv(self.XE.T @ self.XE)
        return coef, np.sqrt(np.diag(cov))

    def conditional(self, y, j: int, b_ref: float = 0.0) -> "LinearTarget":
        return LinearTarget(self, self.sufficient_stat(y, j), b_ref)


class LinearTarget:
    """Conditional law for testing ``b_j`` in the Gaussian linear model.

    Data moves are preconditioned Crank-Nicolson steps in the complement of
    the held projection: with ``r = y - Py`` and ``mu = b_ref R x_j``,

        r' = mu + sqrt(1 - a^2) (r - mu) + a sigma R tau,

    which is reversible for the conditional Gaussian law of ``r``, so only
    the randomization density enters the acceptance ratio.  ``a = 1`` is an
    independent draw from the conditional Gaussian.

    The ``"shift"`` block moves ``r`` along ``R x_j`` by the same
    Crank-Nicolson step and shifts ``beta_E`` by ``delta * v`` where
    ``v`` solves ``(X_E^T X_E + eps I) v = X_E^T u``, so ``omega_E`` is
    unchanged.  The map is a shear with unit Jacobian and the Gaussian part
    is handled by the Crank-Nicolson step, so again only the randomization
    density (now of ``omega_{-E}``) and the sign constraints enter the
    acceptance ratio.  Without it ``T_j`` and ``beta_E`` are tied together
    through ``omega_E`` and the chain mixes slowly when ``|E|`` is large.
    """

    kind = "vector"
    data_blocks = ("stat", "rest", "shift")

    def __init__(self, model: GaussianLinearModel, suff: SufficientStat, b_ref=0.0):
        self.model = model
        self.event = model.event
        self.randomization = model.randomization
        self.suff = suff
        self.j = suff.j
        self.b_ref = float(b_ref)
        self.tilt_scale = 1.0 / model.sigma2
        X = model.X
        rest = [k for k in self.event.active if k != suff.j]
        self.Q = _orthonormal_basis(X[:, rest])
        self.x_j = X[:, suff.j]
        self.sigma = np.sqrt(model.sigma2)
        Rx = self._project_out(self.x_j)
        norm = np.linalg.norm(Rx)
        if norm <= 1e-10 * np.linalg.norm(self.x_j):
            raise SingularSelectionError("tested column lies in the span of the others")
        self.u = Rx / norm
        E = self.event.active
        self.shift = np.linalg.solve(model.XtXE[E], model.XE.T @ self.u)
        self.m = self.b_ref * norm
        self.mu = self.b_ref * Rx
        self.t_obs = suff.T_j

    def _project_out(self, v):
        return v - self.Q @ (self.Q.T @ v)

    def stat(self, state) -> float:
        return float(self.x_j @ state.data)

    def omega(self, state):
        return self.model.omega(state)

    def inactive_offset(self, state):
        return self.model.inactive_offset(state)

    def coef_preconditioner(self):
        return self.model.coef_preconditioner()

    def log_reference(self, state) -> float:
        r = state.data - state.held - self.mu
        return -0.5 * (r @ r) / self.model.sigma2

    def log_target(self, state) -> float:
        if not _inside(self.event, state):
            return -np.inf
        return self.log_reference(state) + self.randomization.log_density(self.omega(state))

    def propose_data(self, state, a, rng, block=None):
        """Crank-Nicolson move of ``r = y - Py``.

        ``block="stat"`` moves only the coordinate of ``r`` along ``R x_j``
        (the direction that changes ``T_j``); ``block="shift"`` does the same
        and moves ``beta_E`` with it (see the class docstring); ``block="rest"`` moves only the
        orthogonal remainder; ``None`` moves both jointly.  Each is reversible
        for the conditional Gaussian since that law is isotropic in ``R``.
        """
        a = min(float(a), 1.0)
        rho = np.sqrt(1.0 - a * a)
        r = state.data - state.held
        c = self.u @ r
        if block in ("stat", "shift"):
            c_new = self.m + rho * (c - self.m) + a * self.sigma * rng.standard_normal()
            r_new = r + (c_new - c) * self.u
            if block == "shift":
                return state.replace(data=state.held + r_new,
                                     beta_E=state.beta_E + (c_new - c) * self.shift)
        else:
            tau = self._project_out(rng.standard_normal(r.shape[0]))
            if block == "rest":
                tau -= (self.u @ tau) * self.u
                perp = r - c * self.u
                r_new = c * self.u + rho * perp + a * self.sigma * tau
            else:
                r_new = self.mu + rho * (r - self.mu) + a * self.sigma * tau
            r_new = self._project_out(r_new)
        return state.replace(data=state.held + r_new)

    def initial_state(self, y, beta_E, z_minus_E) -> ChainState:
        state = ChainState(np.asarray(y, dtype=float).copy(), np.asarray(beta_E, float).copy(),
                           np.asarray(z_minus_E, float).copy(), held=self.suff.held)
        if not _inside(self.event, state):
            raise SamplerInitError("initial state violates the selection constraints")
        return state

    def t_rest(self, state) -> np.ndarray:
        """Nuisance statistics from the held component (identical along a chain)."""
        rest = [k for k in self.event.active if k != self.j]
        return self.model.X[:, rest].T @ state.held


# ---------------------------------------------------------------------------
# Logistic model
# ---------------------------------------------------------------------------


def fit_unpenalized_mle(X, y, active, max_iter=100, one_step_from=None):
    """Unpenalized logistic regression on the columns ``active``.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) 0/1 array
    active : index array
    max_iter : int
        Newton iterations allowed.
    one_step_from : array, optional
        If given, take a single Newton step from this point instead of
        iterating to convergence (the one-step estimator).

    Returns
    -------
    beta_bar : (|E|,) array
    W_bar : (n,) array
        ``pi (1 - pi)`` at the fit.
    Sigma_hat : (p, p) array
        Estimated asymptotic covariance of ``(sqrt(n)(beta_bar_E - b_E),
        X_{-E}^T (y - pi) / sqrt(n))``, ordered ``(E, -E)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        raise ArgumentError("active set is empty")
    XE = X[:, active]
    n = X.shape[0]

    def newton_step(b):
        pi = expit(XE @ b)
        g = XE.T @ (y - pi)
        H = XE.T @ ((pi * (1 - pi))[:, None] * XE)
        try:
            return b + np.linalg.solve(H, g), g
        except np.linalg.LinAlgError as exc:
            raise ModelFitError("singular information matrix") from exc

    if one_step_from is not None:
        b, _ = newton_step(np.asarray(one_step_from, dtype=float))
    else:
        b = np.zeros(active.size)
        for _ in range(max_iter):
            b_new, g = newton_step(b)
            if np.abs(g).max() < 1e-10:
                break
            if not np.all(np.isfinite(b_new)) or np.abs(b_new).max() > 50:
                raise ModelFitError("coefficients diverge (separation)")
            b = b_new
        else:
            raise ModelFitError(f"no convergence in {max_iter} Newton steps")
    pi = expit(X @ _embed(b, active, X.shape[1]))
    W = pi * (1 - pi)
    Q = X.T @ (W[:, None] * X)
    cov = _stat_covariance(Q, active)
    scale = np.empty(X.shape[1])
    scale[:active.size] = np.sqrt(n)
    scale[active.size:] = 1.0 / np.sqrt(n)
    Sigma_hat = cov * np.outer(scale, scale)
    return b, W, Sigma_hat


def _embed(b, active, p):
    out = np.zeros(p)
    out[active] = b
    return out


def _stat_covariance(Q, active):
    """Covariance of ``(beta_bar_E, X_{-E}^T (y - pi_bar))`` ordered ``(E, -E)``."""
    p = Q.shape[0]
    inactive = np.setdiff1d(np.arange(p), active)
    QEE = Q[np.ix_(active, active)]
    QEo = Q[np.ix_(active, inactive)]
    Qoo = Q[np.ix_(inactive, inactive)]
    QEE_inv = np.linalg.inv(QEE)
    S = Qoo - QEo.T @ QEE_inv @ QEo
    cov = np.zeros((p, p))
    k = active.size
    cov[:k, :k] = QEE_inv
    cov[k:, k:] = S
    return cov


class LogisticModel:
    r"""Asymptotic selective law after a randomized l1-logistic regression.

    The data part of a state is the statistic ``T`` stored as a ``p``-vector
    with ``T[E] = beta_bar_E`` and ``T[-E] = X_{-E}^T (y - pi_bar)``.  The
    randomization is reconstructed from a first-order expansion at the
    refitted ``beta_bar_E``,

    .. math::

        \omega = n^{-1/2}\,[Q_{\cdot E}(\beta_E - \bar\beta_E) - (0; N)]
                 + \lambda z + \epsilon(\beta_E; 0),

    with ``Q = X^T W_bar X`` frozen at the observed data.
    """

    def __init__(self, X, y, event: SelectionEvent, randomization: RandomizationDist,
                 one_step=False, beta_hat_E=None):
        if not isinstance(event.loss, Logistic):
            raise ArgumentError("event does not come from a logistic program")
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.event = event
        self.randomization = randomization
        n, p = self.X.shape
        _check_randomization(randomization, p)
        E, notE = event.active, event.inactive
        self.n = n
        start = beta_hat_E if one_step else None
        self.beta_bar_E, self.W_bar, self.Sigma_hat = fit_unpenalized_mle(
            self.X, self.y, E, one_step_from=start)
        Q = self.X.T @ (self.W_bar[:, None] * self.X)
        self.Q = Q
        self.cov_T = _stat_covariance(Q, E)
        self.QEE = Q[np.ix_(E, E)]
        self.Sigma_E = self.cov_T[:E.size, :E.size]
        self.S_minus = self.cov_T[E.size:, E.size:]
        c = 1.0 / np.sqrt(n)
        self.c = c
        # d omega / d beta_E, full p x |E|
        self.A = c * Q[:, E]
        self.A[E, np.arange(E.size)] += event.ridge_eps
        pi_bar = expit(self.X[:, E] @ self.beta_bar_E)
        self.T_obs = np.zeros(p)
        self.T_obs[E] = self.beta_bar_E
        self.T_obs[notE] = self.X[:, notE].T @ (self.y - pi_bar)
        self._lamz_E = np.zeros(p)
        self._lamz_E[E] = event.lam * event.signs

    def omega(self, state) -> np.ndarray:
        ev = self.event
        E = ev.active
        T = state.data
        w = self.A @ state.beta_E - self.c * (self.Q[:, E] @ T[E]) + self._lamz_E
        w[ev.inactive] += ev.lam * state.z_minus_E - self.c * T[ev.inactive]
        return w

    def inactive_offset(self, state):
        ev = self.event
        w = self.omega(state)[ev.inactive]
        return w - ev.lam * state.z_minus_E

    def log_phi(self, T, b_E=None) -> float:
        """Gaussian log density of ``T`` with mean ``(b_E, 0)``."""
        E, notE = self.event.active, self.event.inactive
        b = np.zeros(E.size) if b_E is None else np.asarray(b_E, dtype=float)
        dE = T[E] - b
        dN = T[notE]
        out = -0.5 * dE @ np.linalg.solve(self.Sigma_E, dE)
        if notE.size:
            out -= 0.5 * dN @ np.linalg.solve(self.S_minus, dN)
        return float(out)

    def log_density(self, state, b_E=None) -> float:
        if not _inside(self.event, state):
            return -np.inf
        return self.log_phi(state.data, b_E) + self.randomization.log_density(self.omega(state))

    def jacobian_logdet(self) -> float:
        ev = self.event
        H = self.A[ev.active]
        return logdet_checked(H) + (ev.p - ev.active.size) * np.log(ev.lam)

    def coef_preconditioner(self):
        return 1.0 / np.diag(self.A[self.event.active])

    def unselected_estimate(self):
        return self.beta_bar_E.copy(), np.sqrt(np.diag(self.Sigma_E))

    def conditional(self, j: int, b_ref: float = 0.0) -> "LogisticTarget":
        return LogisticTarget(self, j, b_ref)


class LogisticTarget:
    r"""Conditional law for testing ``b_j`` in the logistic model.

    Conditioning on the sufficient statistics ``(Q_EE beta_bar_E)_{E\j}`` of
    the nuisance coefficients confines ``beta_bar_E`` to the line
    ``nu + d t`` with ``d = Sigma_E[:, j] / Sigma_E[j, j]`` and ``t``
    the tested coordinate.  Along it ``t ~ N(b_j, Sigma_E[j, j])``,
    independently of the inactive score block ``N ~ N(0, S)``; both are moved
    by one preconditioned Crank-Nicolson step.
    """

    kind = "vector"
    data_blocks = ("stat", "rest")

    def __init__(self, model: LogisticModel, j: int, b_ref=0.0):
        E = list(model.event.active)
        if j not in E:
            raise ArgumentError(f"variable {j} is not in the active set")
        self.model = model
        self.event = model.event
        self.randomization = model.randomization
        self.j = j
        self.jpos = E.index(j)
        self.b_ref = float(b_ref)
        S = model.Sigma_E
        self.var_t = S[self.jpos, self.jpos]
        self.sd_t = np.sqrt(self.var_t)
        self.tilt_scale = 1.0 / self.var_t
        self.d = S[:, self.jpos] / self.var_t
        self.held = model.T_obs[model.event.active] - self.d * model.T_obs[j]
        self.held.setflags(write=False)
        if model.S_minus.size:
            self.L_S = np.linalg.cholesky(model.S_minus)
        else:
            self.L_S = np.zeros((0, 0))
        self.t_obs = float(model.T_obs[j])

    def stat(self, state) -> float:
        return float(state.data[self.j])

    def omega(self, state):
        return self.model.omega(state)

    def inactive_offset(self, state):
        return self.model.inactive_offset(state)

    def coef_preconditioner(self):
        return self.model.coef_preconditioner()

    def log_reference(self, state) -> float:
        t = state.data[self.j] - self.b_ref
        N = state.data[self.event.inactive]
        out = -0.5 * t * t / self.var_t
        if N.size:
            u = solve_triangular(self.L_S, N, lower=True)
            out -= 0.5 * u @ u
        return float(out)

    def log_target(self, state) -> float:
        if not _inside(self.event, state):
            return -np.inf
        return self.log_reference(state) + self.randomization.log_density(self.omega(state))

    def _data_from(self, held, t, N):
        T = np.empty(self.event.p)
        T[self.event.active] = held + self.d * t
        T[self.event.active[self.jpos]] = t
        T[self.event.inactive] = N
        return T

    def propose_data(self, state, a, rng, block=None):
        """Crank-Nicolson move of ``t`` (``block="stat"``), ``N`` (``"rest"``) or both."""
        a = min(float(a), 1.0)
        rho = np.sqrt(1.0 - a * a)
        t = state.data[self.j]
        N = state.data[self.event.inactive]
        if block in (None, "stat"):
            t = self.b_ref + rho * (t - self.b_ref) + a * self.sd_t * rng.standard_normal()
        if block in (None, "rest"):
            N = rho * N + a * (self.L_S @ rng.standard_normal(N.size))
        return state.replace(data=self._data_from(state.held, t, N))

    def initial_state(self, beta_E, z_minus_E) -> ChainState:
        T = self._data_from(self.held, self.model.T_obs[self.j],
                            self.model.T_obs[self.event.inactive])
        state = ChainState(T, np.asarray(beta_E, float).copy(),
                           np.asarray(z_minus_E, float).copy(), held=self.held)
        if not _inside(self.event, state):
            raise SamplerInitError("initial state violates the selection constraints")
        return state

    def t_rest(self, state) -> np.ndarray:
        rest = [k for k in range(len(self.held)) if k != self.jpos]
        return (self.model.QEE @ state.held)[rest]


# ---------------------------------------------------------------------------
# Gaussian graphical model (neighborhood selection)
# ---------------------------------------------------------------------------


def symmetrize_edges(active_sets) -> list[tuple[int, int]]:
    """Undirected edges ``(i, j)``, ``i < j``, selected from either endpoint.

    ``active_sets[i]`` lists the original column indices selected for node ``i``.
    """
    edges = set()
    for i, Ei in enumerate(active_sets):
        for k in Ei:
            k = int(k)
            if k == i:
                raise ArgumentError("a node cannot select itself")
            edges.add((min(i, k), max(i, k)))
    return sorted(edges)


@dataclass(frozen=True)
class NodeEvents:
    """Per-node selections of a neighborhood-selection run on ``p`` variables.

    ``active[i]`` holds original column indices and ``signs[i]`` their signs.
    """

    p: int
    lam: float
    active: tuple
    signs: tuple

    @classmethod
    def from_events(cls, events: list[SelectionEvent]) -> "NodeEvents":
        p = len(events)
        lam = events[0].lam
        act, sg = [], []
        for ev in events:
            if not isinstance(ev.loss, NodeRegression):
                raise ArgumentError("expected node-regression events")
            if ev.ridge_eps != 0:
                raise ArgumentError("node regressions here use ridge_eps = 0")
            if ev.lam != lam:
                raise ArgumentError("all nodes must share lam")
            a = ev.loss.others[ev.active]
            a.setflags(write=False)
            act.append(a)
            sg.append(ev.signs)
        return cls(p, lam, tuple(act), tuple(sg))

    @property
    def edges(self):
        return symmetrize_edges(self.active)

    def masks(self):
        """Boolean ``p x p`` matrices: column ``k`` marks node ``k``'s active / inactive entries."""
        A = np.zeros((self.p, self.p), bool)
        for k, Ek in enumerate(self.active):
            A[Ek, k] = True
        off = ~np.eye(self.p, dtype=bool)
        return A, off & ~A

    def sign_matrix(self):
        S = np.zeros((self.p, self.p))
        for k, (Ek, sk) in enumerate(zip(self.active, self.signs)):
            S[Ek, k] = sk
        return S


class GraphicalModel:
    r"""Rows of ``X`` i.i.d. ``N(0, Theta^{-1})`` after neighborhood selection.

    With ``G = X^T X`` and ``B`` the ``p x p`` coefficient matrix (column
    ``k`` holds node ``k``'s regression), the reconstructed randomization is

    .. math::

        \Omega = \tfrac{2}{n}(G B - G) + \lambda Z

    on the off-diagonal entries.  The selective log density is

    .. math::

        -\tfrac12 \mathrm{tr}(\Theta G) + \sum_{k,m \ne k} \log g(\Omega_{mk})
        + \sum_k \log\det\big(\tfrac{2}{n} G[E^k, E^k]\big).
    """

    def __init__(self, X, events: NodeEvents, randomization: RandomizationDist, Theta=None):
        self.X = np.asarray(X, dtype=float)
        n, p = self.X.shape
        if events.p != p:
            raise ArgumentError("events do not match the number of columns")
        _check_randomization(randomization, p - 1)
        self.n, self.p = n, p
        self.events = events
        self.lam = events.lam
        self.randomization = randomization
        self.Theta = np.eye(p) if Theta is None else np.asarray(Theta, dtype=float)
        if not np.allclose(self.Theta, self.Theta.T):
            raise ArgumentError("Theta must be symmetric")
        self.active_mask, self.inactive_mask = events.masks()
        self.signs = events.sign_matrix()
        self.edges = events.edges
        self.G_obs = self.X.T @ self.X
        self.G_obs.setflags(write=False)
        self._by_size = {}
        for k, Ek in enumerate(events.active):
            self._by_size.setdefault(len(Ek), []).append(k)

    # -- pieces of the density ------------------------------------------

    def gram(self, state):
        G = state.cache.get("G")
        if G is None:
            G = state.data.T @ state.data
            state.cache["G"] = G
        return G

    def omega(self, state) -> np.ndarray:
        """``p x p`` matrix; column ``k`` (off the diagonal) is node ``k``'s ``omega``."""
        G = self.gram(state)
        W = (2.0 / self.n) * (G @ state.beta_E - G) + self.lam * self._full_z(state)
        np.fill_diagonal(W, 0.0)
        return W

    def _full_z(self, state):
        return np.where(self.active_mask, self.signs,
                        np.where(self.inactive_mask, state.z_minus_E, 0.0))

    def node_log_g(self, W) -> np.ndarray:
        L = self.randomization.marginal_logpdf(W)
        np.fill_diagonal(L, 0.0)
        return L.sum(0)

    def node_logdets(self, G, nodes=None) -> np.ndarray:
        """``log det((2/n) G[E^k, E^k])`` per node (``-inf`` if not positive definite).

        With ``nodes`` given only those entries are computed; the others are 0.
        """
        out = np.zeros(self.p)
        scale = 2.0 / self.n
        for size, ks in self._by_size.items():
            if size == 0:
                continue
            if nodes is not None:
                ks = [k for k in ks if k in nodes]
                if not ks:
                    continue
            idx = np.array([self.events.active[k] for k in ks])
            M = scale * G[idx[:, :, None], idx[:, None, :]]
            sign, ld = np.linalg.slogdet(M)
            out[ks] = np.where(sign > 0, ld, -np.inf)
        return out

    def log_gaussian(self, G, Theta=None) -> float:
        Th = self.Theta if Theta is None else Theta
        return float(-0.5 * np.sum(Th * G))

    def constraints_ok(self, state) -> bool:
        B, Z = state.beta_E, state.z_minus_E
        if np.any(np.sign(B[self.active_mask]) != self.signs[self.active_mask]):
            return False
        return bool(np.all(np.abs(Z[self.inactive_mask]) < 1))

    def log_density(self, state) -> float:
        if not self.constraints_ok(state):
            return -np.inf
        G = self.gram(state)
        return (self.log_gaussian(G) + self.node_log_g(self.omega(state)).sum()
                + self.node_logdets(G).sum())

    def jacobian_logdet(self, state) -> float:
        ld = self.node_logdets(self.gram(state))
        if np.any(~np.isfinite(ld)):
            raise SingularSelectionError("a selected node design is rank deficient")
        n_inactive = self.inactive_mask.sum()
        return float(ld.sum() + n_inactive * np.log(self.lam))

    def observed_state(self, B_hat, Z_hat) -> ChainState:
        """Chain state from per-node solutions stacked as columns."""
        state = ChainState(self.X.copy(), np.asarray(B_hat, float).copy(),
                           np.asarray(Z_hat, float).copy(), held=self.G_obs)
        return state

    def conditional(self, edge, b_ref: float = 0.0) -> "GraphTarget":
        return GraphTarget(self, edge, b_ref)


class GraphTarget:
    """Conditional law for testing ``Theta_ij = 0`` for a selected edge.

    Held fixed: every ``||x_k||^2`` and ``x_a^T x_b`` for selected edges
    other than the tested one.  Under the hypothesized sparsity pattern the
    Gaussian part is constant on that fiber, so the target is the
    randomization density times the Jacobian, tilted by ``-b_ref x_i^T x_j``.
    The tested statistic is ``x_i^T x_j`` with natural parameter ``-Theta_ij``
    (``tilt_scale = -1``).

    States cache the Gram matrix, ``Omega``, per-node log randomization
    densities and per-node log determinants; column moves update them
    incrementally.
    """

    kind = "graph"

    def __init__(self, model: GraphicalModel, edge, b_ref=0.0):
        i, j = sorted(int(e) for e in edge)
        if (i, j) not in model.edges:
            raise ArgumentError(f"edge {(i, j)} was not selected")
        self.model = model
        self.randomization = model.randomization
        self.edge = (i, j)
        self.b_ref = float(b_ref)
        self.tilt_scale = -1.0
        p = model.p
        adj = [set() for _ in range(p)]
        for a, b in model.edges:
            if (a, b) != (i, j):
                adj[a].add(b)
                adj[b].add(a)
        self.held_neighbors = [np.array(sorted(s), dtype=int) for s in adj]
        # nodes whose log determinant depends on column c
        self.dependents = [[k for k in range(p) if c in set(model.events.active[k].tolist())]
                           for c in range(p)]
        self.t_obs = float(model.G_obs[i, j])

    # -- cached pieces ----------------------------------------------------

    def pieces(self, state):
        """Fill ``state.cache`` with ``G``, ``W``, ``node_lg`` and ``node_ld``."""
        m, cache = self.model, state.cache
        if "G" not in cache:
            cache["G"] = state.data.T @ state.data
        G = cache["G"]
        if "W" not in cache:
            cache["W"] = m.omega(state)
        if "node_lg" not in cache:
            cache["node_lg"] = m.node_log_g(cache["W"])
        if "node_ld" not in cache:
            cache["node_ld"] = m.node_logdets(G)
        return cache

    def stat(self, state) -> float:
        i, j = self.edge
        return float(self.model.gram(state)[i, j])

    def log_tilt(self, G) -> float:
        i, j = self.edge
        return -self.b_ref * G[i, j]

    def log_target(self, state) -> float:
        c = state.cache
        if "ok" not in c:
            c["ok"] = self.model.constraints_ok(state)
        if not c["ok"]:
            return -np.inf
        c = self.pieces(state)
        return float(self.log_tilt(c["G"]) + c["node_lg"].sum() + c["node_ld"].sum())

    def log_reference(self, state) -> float:
        return 0.0

    # -- column moves -----------------------------------------------------

    def propose_column(self, state, c, theta_max, rng, toward=None):
        """Move column ``c`` on its fiber.

        Without ``toward`` the orthogonal part of ``x_c`` is rotated by a
        uniform angle in a random plane, a symmetric proposal for the uniform
        law on the fiber.  With ``toward = k`` the rotation is along the
        great circle through the direction of ``x_k`` (so ``x_c^T x_k``
        changes as much as possible); the uniform law restricted to such a
        circle has density ``|sin psi|^(m-2)`` in the angle ``psi`` from that
        direction, which enters as a log correction.

        Returns ``(state', log_correction)`` or ``None`` when the fiber is a
        point.
        """
        X = state.data
        n = X.shape[0]
        C = self.held_neighbors[c]
        dim = n - C.size
        if dim < 2:
            return None
        G_obs = state.held
        if C.size:
            Q, R = np.linalg.qr(X[:, C])
            a = solve_triangular(R, G_obs[C, c], trans="T", check_finite=False)
            base = Q @ a
            r2 = G_obs[c, c] - a @ a

            def proj(v):
                return v - Q @ (Q.T @ v)
        else:
            base = np.zeros(n)
            r2 = G_obs[c, c]

            def proj(v):
                return v.copy()
        if r2 <= 0:
            return None
        r = np.sqrt(r2)
        w = proj(X[:, c])
        u = w / np.linalg.norm(w)
        ang = theta_max * (2 * rng.random() - 1)
        log_corr = 0.0
        if toward is None:
            v = proj(rng.standard_normal(n))
            v -= (u @ v) * u
            v /= np.linalg.norm(v)
            new_dir = np.cos(ang) * u + np.sin(ang) * v
        else:
            pole = proj(X[:, toward])
            pole = pole / np.linalg.norm(pole)
            cos_psi = np.clip(u @ pole, -1.0, 1.0)
            e2 = u - cos_psi * pole
            e2 /= np.linalg.norm(e2)
            psi = np.arccos(cos_psi)
            psi_new = psi + ang
            new_dir = np.cos(psi_new) * pole + np.sin(psi_new) * e2
            s_old, s_new = abs(np.sin(psi)), abs(np.sin(psi_new))
            if s_new == 0:
                return None
            log_corr = (dim - 2) * (np.log(s_new) - np.log(s_old))
        x_new = base + r * new_dir
        return self._with_column(state, c, x_new), log_corr

    def _with_column(self, state, c, x_new):
        m = self.model
        cache = self.pieces(state)
        X_new = state.data.copy()
        X_new[:, c] = x_new
        new = state.replace(data=X_new)
        G = cache["G"].copy()
        g = X_new.T @ x_new
        g[c] = state.held[c, c]
        delta = g - G[:, c]
        G[:, c] = g
        G[c, :] = g
        # Omega = (2/n)(G B - G) + lam Z changes by (2/n)(dG B - dG), dG = e_c d^T + d e_c^T
        B = state.beta_E
        dW = np.outer(delta, B[c, :])
        dW[c, :] += delta @ B
        dW[:, c] -= delta
        dW[c, :] -= delta
        W = cache["W"] + (2.0 / m.n) * dW
        np.fill_diagonal(W, 0.0)
        nc = new.cache
        if "ok" in cache:
            nc["ok"] = cache["ok"]
        nc["G"] = G
        nc["W"] = W
        nc["node_lg"] = m.node_log_g(W)
        ld = cache["node_ld"].copy()
        deps = self.dependents[c]
        if deps:
            ld[deps] = m.node_logdets(G, set(deps))[deps]
        nc["node_ld"] = ld
        return new

    def initial_state(self, B_hat, Z_hat) -> ChainState:
        state = self.model.observed_state(B_hat, Z_hat)
        if not self.model.constraints_ok(state):
            raise SamplerInitError("initial state violates the selection constraints")
        if not np.isfinite(self.log_target(state)):
            raise SamplerInitError("initial state has zero density")
        return state
