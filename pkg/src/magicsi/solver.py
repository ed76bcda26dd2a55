r"""Randomized l1-penalized programs.

Solves

.. math::

    \hat\beta = \mathrm{argmin}_\beta\ \ell(\beta; S) + \lambda\|\beta\|_1
                - \omega^T\beta + \frac{\epsilon}{2}\|\beta\|_2^2

by cyclic proximal coordinate descent, followed by a Newton polish on the
active set so the stationarity identity holds to machine precision.  Inactive
subgradients are read off the stationarity equation, never from optimizer
internals, so the reconstruction map inverts the solution exactly.

All three losses are of the form ``L(X beta)`` and expose the derivative of
``L`` with respect to the linear predictor, which is all the solver needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import (ArgumentError, ConstraintViolationError, ConvergenceError,
                         SingularSelectionError)
from .state import ChainState

# log10 of the largest acceptable condition number of a selected Gram matrix
_MAX_LOG_COND = 12.0


class SquaredError:
    """``0.5 * ||y - X beta||^2``."""

    name = "squared_error"

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ArgumentError("X must be (n, p) and y length n")

    @property
    def design(self):
        return self.X

    @property
    def response(self):
        return self.y

    def with_data(self, y):
        return SquaredError(self.X, y)

    def value(self, eta):
        r = self.y - eta
        return 0.5 * r @ r

    def deta(self, eta):
        return eta - self.y

    def eta_weights(self, eta):
        return np.ones_like(eta)

    def curvature_bound(self):
        return (self.X ** 2).sum(0)

    def gradient(self, beta):
        return self.X.T @ self.deta(self.X @ beta)

    def hessian(self, beta, cols):
        XA = self.X[:, cols]
        w = self.eta_weights(self.X @ beta)
        return XA.T @ (w[:, None] * XA)


class Logistic:
    r"""Negative Bernoulli log-likelihood scaled by :math:`1/\sqrt{n}`."""

    name = "logistic"

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ArgumentError("X must be (n, p) and y length n")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ArgumentError("logistic responses must be 0/1")
        self.scale = 1.0 / np.sqrt(self.X.shape[0])

    @property
    def design(self):
        return self.X

    @property
    def response(self):
        return self.y

    def with_data(self, y):
        return Logistic(self.X, y)

    def value(self, eta):
        return self.scale * np.sum(np.logaddexp(0.0, eta) - self.y * eta)

    def deta(self, eta):
        return self.scale * (expit(eta) - self.y)

    def eta_weights(self, eta):
        pi = expit(eta)
        return self.scale * pi * (1 - pi)

    def curvature_bound(self):
        return 0.25 * self.scale * (self.X ** 2).sum(0)

    def gradient(self, beta):
        return self.X.T @ self.deta(self.X @ beta)

    def hessian(self, beta, cols):
        XA = self.X[:, cols]
        w = self.eta_weights(self.X @ beta)
        return XA.T @ (w[:, None] * XA)


class NodeRegression:
    """``n^{-1} ||x_i - X_{-i} beta||^2`` for one node of a graphical model.

    The node's own coordinate is structurally zero, so the program lives on
    the ``p - 1`` other columns, listed in ``others``.
    """

    name = "node_regression"

    def __init__(self, X, node: int):
        self.data = np.asarray(X, dtype=float)
        n, p = self.data.shape
        if not 0 <= node < p:
            raise ArgumentError(f"node {node} out of range for p={p}")
        self.node = int(node)
        self.others = np.array([k for k in range(p) if k != node], dtype=int)
        self.X = self.data[:, self.others]
        self.y = self.data[:, node]
        self.n = n

    @property
    def design(self):
        return self.X

    @property
    def response(self):
        return self.y

    def with_data(self, X):
        return NodeRegression(X, self.node)

    def value(self, eta):
        r = self.y - eta
        return (r @ r) / self.n

    def deta(self, eta):
        return (2.0 / self.n) * (eta - self.y)

    def eta_weights(self, eta):
        return np.full_like(eta, 2.0 / self.n)

    def curvature_bound(self):
        return (2.0 / self.n) * (self.X ** 2).sum(0)

    def gradient(self, beta):
        return self.X.T @ self.deta(self.X @ beta)

    def hessian(self, beta, cols):
        XA = self.X[:, cols]
        return (2.0 / self.n) * (XA.T @ XA)


@dataclass(frozen=True)
class ProgramSpec:
    """One randomized program: loss, penalty level, ridge term and drawn ``omega``."""

    loss: SquaredError | Logistic | NodeRegression
    lam: float
    omega: np.ndarray
    ridge_eps: float = 0.0

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        p = self.loss.design.shape[1]
        if omega.shape != (p,):
            raise ArgumentError(f"omega must have length {p}, got {omega.shape}")
        if not self.lam > 0:
            raise ArgumentError("lam must be positive")
        if self.ridge_eps < 0:
            raise ArgumentError("ridge_eps must be nonnegative")
        if isinstance(self.loss, Logistic) and not self.ridge_eps > 0:
            raise ArgumentError("the logistic program needs ridge_eps > 0")
        object.__setattr__(self, "omega", omega)

    @property
    def p(self) -> int:
        return self.loss.design.shape[1]

    def objective(self, beta) -> float:
        eta = self.loss.design @ beta
        return (self.loss.value(eta) + self.lam * np.abs(beta).sum()
                - self.omega @ beta + 0.5 * self.ridge_eps * beta @ beta)


@dataclass
class Solution:
    beta_hat: np.ndarray
    z_hat: np.ndarray
    active: np.ndarray
    signs: np.ndarray
    objective_trace: list = field(default_factory=list)
    n_sweeps: int = 0

    @property
    def inactive(self):
        mask = np.ones(self.beta_hat.shape[0], bool)
        mask[self.active] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class SelectionEvent:
    """Conditioning data ``(E, z_{E,obs})`` fixed after selection."""

    active: np.ndarray
    signs: np.ndarray
    lam: float
    ridge_eps: float
    loss: SquaredError | Logistic | NodeRegression

    def __post_init__(self):
        active = np.array(self.active, dtype=int)
        signs = np.array(self.signs, dtype=float)
        if active.shape != signs.shape:
            raise ArgumentError("signs and active set differ in length")
        active.setflags(write=False)
        signs.setflags(write=False)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "signs", signs)

    @classmethod
    def from_solution(cls, spec: ProgramSpec, sol: Solution) -> "SelectionEvent":
        return cls(sol.active, sol.signs, spec.lam, spec.ridge_eps, spec.loss)

    @property
    def p(self) -> int:
        return self.loss.design.shape[1]

    @property
    def inactive(self) -> np.ndarray:
        mask = np.ones(self.p, bool)
        mask[self.active] = False
        return np.flatnonzero(mask)

    def full_beta(self, beta_E):
        beta = np.zeros(self.p)
        beta[self.active] = beta_E
        return beta

    def full_z(self, z_minus_E):
        z = np.zeros(self.p)
        z[self.active] = self.signs
        z[self.inactive] = z_minus_E
        return z

    def observed_state(self, sol: Solution) -> ChainState:
        return ChainState(np.array(self.loss.response if not isinstance(
            self.loss, NodeRegression) else self.loss.data, copy=True),
            sol.beta_hat[self.active].copy(), sol.z_hat[self.inactive].copy())


def _soft(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def _assemble(spec: ProgramSpec, beta, tol) -> Solution:
    beta = np.where(np.abs(beta) > 10 * tol, beta, 0.0)
    active = np.flatnonzero(beta)
    grad = spec.loss.gradient(beta)
    z = (spec.omega - grad - spec.ridge_eps * beta) / spec.lam
    z[active] = np.sign(beta[active])
    return Solution(beta, z, active, np.sign(beta[active]))


def _polish(spec: ProgramSpec, beta, max_newton=50):
    """Newton's method on the stationarity equation with signs frozen."""
    A = np.flatnonzero(beta)
    if A.size == 0:
        return beta
    loss, lam, eps = spec.loss, spec.lam, spec.ridge_eps
    XA = loss.design[:, A]
    s = np.sign(beta[A])
    bA = beta[A].copy()
    scale = 1.0 + np.abs(spec.omega).max() + lam

    def resid(b):
        return XA.T @ loss.deta(XA @ b) + eps * b + lam * s - spec.omega[A]

    r = resid(bA)
    for _ in range(max_newton):
        if np.abs(r).max() < 1e-14 * scale:
            break
        eta = XA @ bA
        H = XA.T @ (loss.eta_weights(eta)[:, None] * XA) + eps * np.eye(A.size)
        try:
            step = np.linalg.solve(H, r)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        while True:
            cand = bA - t * step
            rc = resid(cand)
            if np.abs(rc).max() < np.abs(r).max() or t < 1e-6:
                break
            t *= 0.5
        bA, r = cand, rc
    if np.any(np.sign(bA) != s):
        return None
    out = np.zeros_like(beta)
    out[A] = bA
    return out


def solve_randomized(spec: ProgramSpec, tol: float = 1e-10, max_iter: int = 20000,
                     polish_below: float = 1e-3) -> Solution:
    """Solve the randomized program by cyclic proximal coordinate descent.

    Parameters
    ----------
    spec : ProgramSpec
    tol : float
        Target KKT residual (see :func:`kkt_residual`).  Coordinates with
        ``|beta_j| <= 10 * tol`` are treated as zero.
    max_iter : int
        Maximum number of full coordinate sweeps.
    polish_below : float
        Once the residual falls below this value a Newton polish on the
        current active set is attempted after every sweep.

    Returns
    -------
    Solution

    Raises
    ------
    ConvergenceError
        If the residual is still above ``tol`` after ``max_iter`` sweeps.
    """
    if not tol > 0:
        raise ArgumentError("tol must be positive")
    loss, lam, eps, omega = spec.loss, spec.lam, spec.ridge_eps, spec.omega
    X = loss.design
    n, p = X.shape
    L = loss.curvature_bound() + eps
    if np.any(L <= 0):
        raise ArgumentError("zero column with ridge_eps=0: program may be unbounded")
    beta = np.zeros(p)
    eta = np.zeros(n)
    trace = [spec.objective(beta)]
    res = np.inf
    for sweep in range(1, max_iter + 1):
        for j in range(p):
            xj = X[:, j]
            g = xj @ loss.deta(eta) + eps * beta[j] - omega[j]
            new = _soft(beta[j] - g / L[j], lam / L[j])
            d = new - beta[j]
            if d != 0.0:
                eta += d * xj
                beta[j] = new
        trace.append(spec.objective(beta))
        if not np.isfinite(trace[-1]) or np.abs(beta).max() > 1e8:
            raise ConvergenceError("iterates diverge: the program looks unbounded below"
                                   + _ridge_hint(spec), np.inf)
        sol = _assemble(spec, beta, tol)
        res = kkt_residual(spec, sol)
        if res < tol:
            break
        if res < polish_below:
            polished = _polish(spec, sol.beta_hat)
            if polished is not None:
                cand = _assemble(spec, polished, tol)
                if kkt_residual(spec, cand) < tol:
                    sol = cand
                    res = 0.0
                    trace.append(spec.objective(sol.beta_hat))
                    break
    else:
        raise ConvergenceError(f"no convergence in {max_iter} sweeps" + _ridge_hint(spec), res)
    sol.objective_trace = trace
    sol.n_sweeps = sweep
    return sol


def _ridge_hint(spec):
    X = spec.loss.design
    if spec.ridge_eps == 0 and X.shape[1] > X.shape[0]:
        return "; with p > n and ridge_eps = 0 the objective can be unbounded, use ridge_eps > 0"
    return ""


def kkt_residual(spec: ProgramSpec, sol: Solution) -> float:
    """Sup-norm violation of the KKT system.

    Combines the stationarity residual
    ``|| grad + lam * z + eps * beta - omega ||_inf`` with subgradient
    validity: ``|z_j| <= 1`` off the active set, ``z_j = sign(beta_j)`` and
    ``beta_j != 0`` on it, ``beta_j = 0`` off it.
    """
    beta, z = sol.beta_hat, sol.z_hat
    stat = spec.loss.gradient(beta) + spec.lam * z + spec.ridge_eps * beta - spec.omega
    parts = [np.abs(stat).max(initial=0.0)]
    inactive = sol.inactive
    parts.append(max(0.0, np.abs(z[inactive]).max(initial=0.0) - 1.0))
    parts.append(np.abs(beta[inactive]).max(initial=0.0))
    A = sol.active
    parts.append(np.abs(z[A] - np.sign(beta[A])).max(initial=0.0))
    return float(max(parts))


def check_constraints(event: SelectionEvent, beta_E, z_minus_E, strict=True) -> bool:
    beta_E = np.asarray(beta_E)
    z_minus_E = np.asarray(z_minus_E)
    if beta_E.shape != event.signs.shape or np.any(np.sign(beta_E) != event.signs):
        return False
    bound = np.abs(z_minus_E).max(initial=0.0)
    return bool(bound < 1 if strict else bound <= 1)


def reconstruct_omega(event: SelectionEvent, state: ChainState) -> np.ndarray:
    """Invert the optimization map: ``omega = grad(beta) + lam * z + eps * beta``.

    ``state.data`` replaces the observed response (or, for node regression,
    the data matrix).  The closure of the constraint set is accepted since the
    KKT characterization allows ``|z_j| = 1`` off the active set.
    """
    if not check_constraints(event, state.beta_E, state.z_minus_E, strict=False):
        raise ConstraintViolationError("state outside the selection constraint set")
    loss = event.loss.with_data(state.data)
    beta = event.full_beta(state.beta_E)
    z = event.full_z(state.z_minus_E)
    return loss.gradient(beta) + event.lam * z + event.ridge_eps * beta


def logdet_checked(M) -> float:
    if M.shape[0] == 0:
        return 0.0
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise SingularSelectionError("selected Gram matrix is singular")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or np.log10(cond) > _MAX_LOG_COND:
        raise SingularSelectionError(f"selected Gram matrix is ill conditioned ({cond:.3g})")
    return float(logdet)


def jacobian_logdet(event: SelectionEvent, state: ChainState) -> float:
    r"""log |det D_{(\beta_E, z_{-E})} \psi| on the fiber over ``state.data``.

    The derivative is block lower-triangular with diagonal blocks
    ``H_EE + eps I`` (loss Hessian on the active set) and ``lam I``.
    """
    loss = event.loss.with_data(state.data)
    E = event.active
    beta = event.full_beta(state.beta_E)
    H = loss.hessian(beta, E) + event.ridge_eps * np.eye(E.size)
    return logdet_checked(H) + (event.p - E.size) * np.log(event.lam)
