import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from magicsi.exceptions import ArgumentError, SamplerInitError
from magicsi.models import (GaussianLinearModel, GraphicalModel, LogisticModel, NodeEvents,
                            fit_unpenalized_mle, symmetrize_edges)
from magicsi.randomization import gaussian, laplace
from magicsi.simulate import LogisticSetting, logistic_lambda, simulate_logistic
from magicsi.solver import (Logistic, ProgramSpec, SelectionEvent, SquaredError,
                            jacobian_logdet, solve_randomized)
from magicsi.state import ChainState

from instances import graph_instance, lasso_instance, logistic_instance
from oracles import fd_logdet, finite_difference_jacobian


# -- Gaussian linear model -----------------------------------------------------


def one_dim_model():
    X = np.array([[1.0]])
    ev = SelectionEvent(np.array([0]), np.array([1.0]), 1.0, 0.0,
                        SquaredError(X, np.array([0.3])))
    return GaussianLinearModel(X, 1.0, ev, gaussian(1.0, 1))


@pytest.mark.parametrize("y,beta", [(0.3, 0.5), (-1.0, 2.0), (2.5, 0.01)])
def test_one_dim_density_is_product_of_normals(y, beta):
    model = one_dim_model()
    # omega = beta - y + lam, both factors standard normal
    expected = stats.norm.logpdf(y) + stats.norm.logpdf(beta - y + 1.0)
    ref = stats.norm.logpdf(0.0) + stats.norm.logpdf(1.0 - 0.0 + 1.0)
    got = model.log_density(ChainState(np.array([y]), np.array([beta]), np.array([])))
    got_ref = model.log_density(ChainState(np.array([0.0]), np.array([1.0]), np.array([])))
    assert got - got_ref == pytest.approx(expected - ref, abs=1e-12)


@pytest.mark.invariant
@pytest.mark.parametrize("seed", range(3))
def test_lasso_exponential_tilt_identity(seed):
    X, y, spec, sol, ev, model = lasso_instance(seed, sigma2=1.7)
    rng = np.random.default_rng(seed)
    b_E = rng.standard_normal(ev.active.size)
    tilted = GaussianLinearModel(X, 1.7, ev, model.randomization, b_E=b_E)
    XE = X[:, ev.active]
    for _ in range(5):
        state = ChainState(y + rng.standard_normal(y.size),
                           ev.signs * rng.exponential(size=ev.active.size),
                           rng.uniform(-0.9, 0.9, ev.inactive.size))
        diff = tilted.log_density(state) - model.log_density(state)
        expected = (b_E @ (XE.T @ state.data)) / 1.7 - (XE @ b_E) @ (XE @ b_E) / (2 * 1.7)
        assert diff == pytest.approx(expected, abs=1e-9)


@pytest.mark.invariant
def test_densities_outside_constraints_are_minus_inf():
    X, y, spec, sol, ev, lin = lasso_instance(0)
    state = ev.observed_state(sol)
    assert np.isfinite(lin.log_density(state))
    z = state.z_minus_E.copy()
    z[0] = 1.5
    assert lin.log_density(state.replace(z_minus_E=z)) == -np.inf
    assert lin.log_density(state.replace(beta_E=-state.beta_E)) == -np.inf

    X, y, spec, sol, ev, logit = logistic_instance(0)
    s = ChainState(logit.T_obs, sol.beta_hat[ev.active], sol.z_hat[ev.inactive])
    assert np.isfinite(logit.log_density(s))
    assert logit.log_density(s.replace(beta_E=-s.beta_E)) == -np.inf
    z = s.z_minus_E.copy()
    z[0] = 1.5
    assert logit.log_density(s.replace(z_minus_E=z)) == -np.inf

    X, fits, gm = graph_instance(0)
    st = gm.observed_state(fits.B, fits.Z)
    assert np.isfinite(gm.log_density(st))
    Z = fits.Z.copy()
    Z[gm.inactive_mask] = 1.5
    assert gm.log_density(gm.observed_state(fits.B, Z)) == -np.inf
    B = fits.B.copy()
    B[gm.active_mask] *= -1
    assert gm.log_density(gm.observed_state(B, fits.Z)) == -np.inf


@pytest.mark.invariant
def test_projector_idempotent_and_conditioning_preserved():
    X, y, spec, sol, ev, model = lasso_instance(1, min_active=2)
    j = int(ev.active[0])
    target = model.conditional(y, j)
    held = target.suff.held
    assert np.allclose(target._project_out(target._project_out(y)), target._project_out(y),
                       atol=1e-12)
    assert np.allclose(y - target._project_out(y), held, atol=1e-12)
    rest = [k for k in ev.active if k != j]
    state = target.initial_state(y, sol.beta_hat[ev.active], sol.z_hat[ev.inactive])
    rng = np.random.default_rng(0)
    for block in (None, "stat", "rest"):
        prop = target.propose_data(state, 0.7, rng, block)
        assert np.abs(X[:, rest].T @ prop.data - X[:, rest].T @ y).max() < 1e-10


def test_empty_rest_moves_freely():
    X, y, spec, sol, ev, model = lasso_instance(2, n=10, p=1, lam=3.0)
    assert ev.active.size == 1
    target = model.conditional(y, int(ev.active[0]))
    assert np.all(target.suff.held == 0)
    assert target.Q.shape[1] == 0
    state = target.initial_state(y, sol.beta_hat[ev.active], sol.z_hat[ev.inactive])
    prop = target.propose_data(state, 1.0, np.random.default_rng(0))
    assert not np.allclose(prop.data, y)


def test_orthonormal_design_statistic():
    Q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((3, 2)))
    y = np.array([1.0, -2.0, 0.5])
    ev = SelectionEvent(np.array([0, 1]), np.array([1.0, 1.0]), 0.1, 0.0, SquaredError(Q, y))
    model = GaussianLinearModel(Q, 1.0, ev, gaussian(1.0, 2))
    coef = np.linalg.lstsq(Q, y, rcond=None)[0]
    for j in range(2):
        suff = model.sufficient_stat(y, j)
        assert suff.T_j == pytest.approx(coef[j], abs=1e-12)
        assert np.allclose(suff.held, coef[1 - j] * Q[:, 1 - j], atol=1e-12)


@pytest.mark.invariant
@pytest.mark.parametrize("seed", range(3))
def test_nuisance_tilt_constant_on_conditioned_fiber(seed):
    X, y, spec, sol, ev, model = lasso_instance(seed, min_active=2)
    j = int(ev.active[0])
    target = model.conditional(y, j)
    rng = np.random.default_rng(seed)
    b0 = np.zeros(ev.active.size)
    b1 = b0.copy()
    b1[1:] = rng.standard_normal(ev.active.size - 1)
    state = target.initial_state(y, sol.beta_hat[ev.active], sol.z_hat[ev.inactive])
    diffs = []
    for _ in range(20):
        state = target.propose_data(state, 0.9, rng)
        diffs.append(model.log_gaussian(state.data, b1) - model.log_gaussian(state.data, b0))
    assert np.ptp(diffs) < 1e-9 * (1 + np.abs(diffs).max())


def test_lasso_model_validation():
    X, y, spec, sol, ev, model = lasso_instance(0)
    with pytest.raises(ArgumentError):
        GaussianLinearModel(X, 0.0, ev, model.randomization)
    with pytest.raises(ArgumentError):
        GaussianLinearModel(X, 1.0, ev, gaussian(1.0, X.shape[1] + 1))
    with pytest.raises(ArgumentError):
        model.sufficient_stat(y, int(ev.inactive[0]))


def test_initial_state_outside_rejected():
    X, y, spec, sol, ev, model = lasso_instance(0)
    target = model.conditional(y, int(ev.active[0]))
    with pytest.raises(SamplerInitError):
        target.initial_state(y, -sol.beta_hat[ev.active], sol.z_hat[ev.inactive])


# -- Jacobians -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_lasso_model_jacobian_matches_finite_differences(seed):
    X, y, spec, sol, ev, model = lasso_instance(seed, n=6, p=5, lam=2.0, ridge_eps=0.1)
    state = ev.observed_state(sol)
    k = ev.active.size

    def psi(v):
        return model.omega(state.replace(beta_E=v[:k], z_minus_E=v[k:]))
    x = np.concatenate([state.beta_E, state.z_minus_E])
    assert model.jacobian_logdet() == pytest.approx(fd_logdet(psi, x), rel=1e-5)
    assert model.jacobian_logdet() == pytest.approx(jacobian_logdet(ev, state), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_logistic_jacobian_matches_taylor_map(seed):
    X, y, spec, sol, ev, model = logistic_instance(seed)
    state = ChainState(model.T_obs, np.abs(model.beta_bar_E) * ev.signs + 0.01 * ev.signs,
                       sol.z_hat[ev.inactive])
    k = ev.active.size

    def psi(v):
        return model.omega(state.replace(beta_E=v[:k], z_minus_E=v[k:]))
    x = np.concatenate([state.beta_E, state.z_minus_E])
    assert model.jacobian_logdet() == pytest.approx(fd_logdet(psi, x), rel=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_graph_jacobian_matches_finite_differences(seed):
    X, fits, model = graph_instance(seed)
    state = model.observed_state(fits.B, fits.Z)
    total = 0.0
    for k in range(model.p):
        a = np.flatnonzero(model.active_mask[:, k])
        z = np.flatnonzero(model.inactive_mask[:, k])
        others = np.flatnonzero(np.arange(model.p) != k)

        def psi(v, k=k, a=a, z=z, others=others):
            B = fits.B.copy()
            Z = fits.Z.copy()
            B[a, k] = v[:a.size]
            Z[z, k] = v[a.size:]
            s = ChainState(state.data, B, Z)
            return model.omega(s)[others, k]
        total += fd_logdet(psi, np.concatenate([fits.B[a, k], fits.Z[z, k]]))
    assert model.jacobian_logdet(state) == pytest.approx(total, rel=1e-5)


# -- logistic model ------------------------------------------------------------


def test_logistic_omega_at_refit_point():
    X, y, spec, sol, ev, model = logistic_instance(4)
    state = ChainState(model.T_obs, model.beta_bar_E, sol.z_hat[ev.inactive])
    w = model.omega(state)
    expected = ev.lam * ev.signs + ev.ridge_eps * model.beta_bar_E
    assert np.allclose(w[ev.active], expected, atol=1e-12)


def test_logistic_log_phi_gradient():
    X, y, spec, sol, ev, model = logistic_instance(5)
    rng = np.random.default_rng(0)
    b_E = 0.1 * rng.standard_normal(ev.active.size)
    T = model.T_obs + 0.05 * rng.standard_normal(ev.p)
    g = finite_difference_jacobian(lambda t: np.array([model.log_phi(t, b_E)]), T, h=1e-5)[0]
    mean = np.zeros(ev.p)
    mean[ev.active] = b_E
    order = np.concatenate([ev.active, ev.inactive])
    prec = np.linalg.inv(model.cov_T)
    expected = np.empty(ev.p)
    expected[order] = -prec @ (T - mean)[order]
    assert np.allclose(g, expected, rtol=1e-5, atol=1e-5 * np.abs(expected).max())


def test_score_vanishes_at_refit():
    X, y, spec, sol, ev, model = logistic_instance(6)
    XE = X[:, ev.active]
    assert np.abs(XE.T @ (y - expit(XE @ model.beta_bar_E))).max() < 1e-8


def test_refit_near_zero_under_global_null():
    rng = np.random.default_rng(7)
    n = 4000
    X = rng.standard_normal((n, 3))
    y = (rng.random(n) < 0.5).astype(float)
    b, W, Sigma = fit_unpenalized_mle(X, y, np.array([0, 2]))
    se = np.sqrt(np.diag(Sigma)[:2] / n)
    assert np.all(np.abs(b) < 4 * se)


def test_stat_covariance_matches_monte_carlo():
    rng = np.random.default_rng(8)
    n, p = 500, 5
    E = np.array([0, 1])
    b = np.array([0.4, -0.3])
    X = rng.standard_normal((n, p))
    pi = expit(X[:, E] @ b)
    draws = []
    Sigma_hat = None
    for _ in range(2000):
        y = (rng.random(n) < pi).astype(float)
        bar, W, Sig = fit_unpenalized_mle(X, y, E)
        if Sigma_hat is None:
            Sigma_hat = Sig
        N = X[:, 2:].T @ (y - expit(X[:, E] @ bar))
        draws.append(np.concatenate([np.sqrt(n) * (bar - b), N / np.sqrt(n)]))
    emp = np.cov(np.array(draws).T)
    err = np.linalg.norm(emp - Sigma_hat) / np.linalg.norm(emp)
    assert err < 0.15


def _taylor_gaps(n, snr, reps):
    st = LogisticSetting(n=n, snr=snr)
    gaps = []
    for s in range(reps):
        rng = np.random.default_rng(s)
        X, y, b = simulate_logistic(st, rng)
        lam = logistic_lambda(X, st.kappa, np.random.default_rng(1), 200)
        G = laplace(st.rand_scale, st.p)
        omega = G.sample(1, rng)[0]
        spec = ProgramSpec(Logistic(X, y), lam, omega, st.ridge_eps)
        sol = solve_randomized(spec)
        ev = SelectionEvent.from_solution(spec, sol)
        if not ev.active.size:
            continue
        model = LogisticModel(X, y, ev, G)
        w = model.omega(ChainState(model.T_obs, sol.beta_hat[ev.active],
                                   sol.z_hat[ev.inactive]))
        gaps.append(np.abs(w - omega).max())
    return np.array(gaps)


def test_taylor_reconstruction_gap_small_under_null():
    gaps = _taylor_gaps(500, 0.0, 10)
    assert gaps.size >= 5
    assert gaps.max() < 0.5


def test_taylor_reconstruction_gap_shrinks_with_n():
    small = np.median(_taylor_gaps(500, 7.0, 8))
    large = np.median(_taylor_gaps(2000, 7.0, 8))
    assert large < 0.6 * small


def test_one_step_option():
    X, y, spec, sol, ev, full = logistic_instance(9)
    one = LogisticModel(X, y, ev, full.randomization, one_step=True,
                        beta_hat_E=sol.beta_hat[ev.active])
    assert np.all(np.isfinite(one.beta_bar_E))
    assert not np.allclose(one.beta_bar_E, full.beta_bar_E)
    assert np.abs(one.beta_bar_E - full.beta_bar_E).max() < 0.5


def test_logistic_target_holds_nuisance_statistics():
    X, y, spec, sol, ev, model = logistic_instance(10, min_active=3)
    j = int(ev.active[0])
    target = model.conditional(j)
    state = target.initial_state(sol.beta_hat[ev.active], sol.z_hat[ev.inactive])
    t0 = target.t_rest(state)
    rng = np.random.default_rng(0)
    QEE = model.QEE
    jpos = 0
    for _ in range(50):
        state = target.propose_data(state, 0.8, rng)
        TE = state.data[ev.active]
        direct = np.delete(QEE @ TE, jpos)
        assert np.allclose(direct, t0, rtol=1e-9, atol=1e-9)
        assert np.array_equal(target.t_rest(state), t0)


# -- graphical model -----------------------------------------------------------


def test_graph_gaussian_part_identity_precision():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((20, 4))
    events = NodeEvents(4, 0.5, tuple(np.array([], int) for _ in range(4)),
                        tuple(np.array([]) for _ in range(4)))
    model = GraphicalModel(X, events, laplace(0.1, 3))
    assert model.edges == []
    assert model.log_gaussian(X.T @ X) == pytest.approx(-0.5 * np.sum(X ** 2))


def test_graph_gaussian_part_matches_multivariate_normal():
    Theta = np.array([[1.0, 0.4], [0.4, 1.0]])
    Sigma = np.linalg.inv(Theta)
    rng = np.random.default_rng(12)
    events = NodeEvents(2, 0.5, (np.array([1]), np.array([0])),
                        (np.array([1.0]), np.array([1.0])))
    X1 = rng.standard_normal((10, 2))
    X2 = rng.standard_normal((10, 2))
    model = GraphicalModel(X1, events, laplace(0.1, 1), Theta)
    mvn = stats.multivariate_normal(np.zeros(2), Sigma)
    direct = mvn.logpdf(X1).sum() - mvn.logpdf(X2).sum()
    ours = model.log_gaussian(X1.T @ X1) - model.log_gaussian(X2.T @ X2)
    assert ours == pytest.approx(direct, abs=1e-10)


def test_graph_gaussian_part_row_exchangeable():
    X, fits, model = graph_instance(1)
    perm = np.random.default_rng(0).permutation(X.shape[0])
    Xp = X[perm]
    assert model.log_gaussian(Xp.T @ Xp) == pytest.approx(model.log_gaussian(X.T @ X), abs=1e-10)


def test_symmetrize_or_rule():
    # node 0 selects node 1, node 1 selects nothing
    assert symmetrize_edges([[1], []]) == [(0, 1)]
    assert symmetrize_edges([[], [], []]) == []
    dense = [[k for k in range(4) if k != i] for i in range(4)]
    assert symmetrize_edges(dense) == [(i, j) for i in range(4) for j in range(i + 1, 4)]
    with pytest.raises(ArgumentError):
        symmetrize_edges([[0], []])


def test_node_events_from_solutions():
    X, fits, model = graph_instance(2)
    for k in range(model.p):
        assert k not in fits.events.active[k]
        assert np.array_equal(np.flatnonzero(fits.B[:, k]), np.sort(fits.events.active[k]))


@pytest.mark.parametrize("seed", range(3))
def test_graph_column_update_matches_fresh_evaluation(seed):
    X, fits, model = graph_instance(seed)
    edge = model.edges[0]
    target = model.conditional(edge)
    state = target.initial_state(fits.B, fits.Z)
    rng = np.random.default_rng(seed)
    for c in range(model.p):
        out = target.propose_column(state, c, 0.5, rng)
        if out is None:
            continue
        prop, _ = out
        fresh = ChainState(prop.data.copy(), prop.beta_E, prop.z_minus_E, held=prop.held)
        target.log_target(fresh)
        for key in ("G", "W", "node_lg", "node_ld"):
            assert np.allclose(prop.cache[key], fresh.cache[key], atol=1e-9)
        assert target.log_target(prop) == pytest.approx(target.log_target(fresh), abs=1e-8)
        state = prop


def test_graph_target_rejects_unselected_edge():
    X, fits, model = graph_instance(3)
    missing = [(i, j) for i in range(model.p) for j in range(i + 1, model.p)
               if (i, j) not in model.edges]
    if missing:
        with pytest.raises(ArgumentError):
            model.conditional(missing[0])
