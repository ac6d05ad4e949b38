import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from fbsde_game_lab import equilibrium as eq
from fbsde_game_lab import ou_filter as of
from fbsde_game_lab.errors import InvalidArgument, NumericalFailure
from fbsde_game_lab.stochastic_core import make_time_grid, sample_brownian_bundle

positive = st.floats(0.1, 3.0)


def scalar_steady_state(theta, sigma, zeta):
    """Positive root of 0 = zeta^2 - 2 theta P - P^2 / sigma^2."""
    return sigma**2 * (-theta + np.sqrt(theta**2 + zeta**2 / sigma**2))


# ---- Riccati


def test_riccati_absorbing_zero():
    P = of.solve_riccati(of.ou_params(2, 1.0, 0.0, 0.0, P0=0.0), np.eye(2), make_time_grid(1.0, 32))
    assert np.all(P == 0)


def test_riccati_separable_closed_form():
    g = make_time_grid(1.0, 128)
    P = of.solve_riccati(of.ou_params(1, 0.0, 0.0, 0.0, P0=1.0), 1.0, g)[:, 0, 0]
    assert np.max(np.abs(P - 1 / (1 + g.times))) <= 10 * g.dt**2


@pytest.mark.parametrize("P0", [0.01, 1.0, 3.0])
def test_riccati_scalar_steady_state(P0):
    g = make_time_grid(5.0, 128)
    P = of.solve_riccati(of.ou_params(1, 1.0, 0.0, 1.0, P0=P0), 1.0, g)
    assert abs(P[-1, 0, 0] - (np.sqrt(2) - 1)) <= 1e-6


@pytest.mark.parametrize("P0", [0.01, 1.0, 7.5])
def test_riccati_scalar_transient_closed_form(P0):
    # u = P - P_inf solves u' = -a u - u^2 with a = 2 sqrt 2
    a = 2 * np.sqrt(2)
    g = make_time_grid(5.0, 128)
    u0 = P0 - (np.sqrt(2) - 1)
    decay = np.exp(-a * g.times)
    exact = np.sqrt(2) - 1 + a * u0 * decay / (a + u0 * (1 - decay))
    P = of.solve_riccati(of.ou_params(1, 1.0, 0.0, 1.0, P0=P0), 1.0, g)[:, 0, 0]
    assert np.max(np.abs(P - exact)) <= 1e-6 * max(1.0, P0)


@given(positive, positive, positive)
def test_riccati_steady_state_random_triples(theta, sigma, zeta):
    rate = 2 * np.sqrt(theta**2 + zeta**2 / sigma**2)
    T = 25.0 / rate
    g = make_time_grid(T, 400)
    P = of.solve_riccati(of.ou_params(1, theta, 0.0, zeta, P0=0.5), sigma, g)
    assert abs(P[-1, 0, 0] - scalar_steady_state(theta, sigma, zeta)) <= 1e-6


def test_riccati_matrix_steady_state_matches_algebraic_solver():
    theta = np.array([0.8, 1.5])
    zeta = np.array([[0.3, 0.1], [0.0, 0.4]])
    sigma = np.array([[0.5, 0.1], [0.2, 0.7]])
    g = make_time_grid(20.0, 400)
    P = of.solve_riccati(of.ou_params(2, theta, 0.0, zeta, P0=np.eye(2)), sigma, g)[-1]
    s_inv = np.linalg.inv(sigma)
    X = scipy.linalg.solve_continuous_are(-np.diag(theta).T, s_inv.T, zeta @ zeta.T, np.eye(2))
    np.testing.assert_allclose(P, X, atol=1e-8)


@given(st.integers(0, 10_000))
def test_riccati_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    n = 3
    a = rng.normal(size=(n, n))
    # singular values of sigma in [0.7, 1.3] keep the explicit step stable
    sigma = np.eye(n) + 0.3 * a / np.linalg.norm(a, 2)
    zeta = rng.normal(size=(n, n)) * 0.5
    b = rng.normal(size=(n, n))
    P0 = b @ b.T
    P = of.solve_riccati(of.ou_params(n, rng.uniform(0.1, 2, n), 0.0, zeta, P0=P0), sigma, make_time_grid(1.0, 64))
    assert np.max(np.abs(P - P.transpose(0, 2, 1))) <= 1e-10
    assert np.linalg.eigvalsh(P).min() >= -1e-8


def test_riccati_independent_of_seed():
    params = of.ou_params(1, 1.0, 0.0, 0.3, P0=0.2)
    g = make_time_grid(1.0, 16)
    assert np.array_equal(of.solve_riccati(params, 0.2, g), of.solve_riccati(params, 0.2, g))


def test_riccati_singular_sigma():
    with pytest.raises(InvalidArgument):
        of.solve_riccati(of.ou_params(2, 1.0, 0.0, 0.1), np.ones((2, 2)), make_time_grid(1.0, 8))


def test_riccati_reports_loss_of_psd():
    # a stiff decay far beyond the step's stability region drives P negative
    params = of.ou_params(1, 1000.0, 0.0, 0.0, P0=1.0)
    with pytest.raises(NumericalFailure) as info:
        of.solve_riccati(params, 1.0, make_time_grid(1.0, 10), substeps=1)
    assert "step" in info.value.report


def test_riccati_near_singular_sigma_fails_loudly():
    sigma = np.diag([1.0, 1.0, 0.02])
    with pytest.raises(NumericalFailure):
        of.solve_riccati(of.ou_params(3, 1.0, 0.0, 0.5, P0=8 * np.eye(3)), sigma, make_time_grid(1.0, 64))


# ---- drift and observations


def test_drift_fixed_point():
    g = make_time_grid(1.0, 16)
    mu = of.simulate_ou_drift(of.ou_params(2, 1.0, 0.3, 0.0, m0=0.3, P0=0.0), np.zeros((4, 16, 2)), g)
    assert np.all(mu == 0.3)


def test_drift_euler_decay():
    g = make_time_grid(1.0, 64)
    mu = of.simulate_ou_drift(of.ou_params(1, 1.0, 0.0, 0.0, m0=1.0, P0=0.0), np.zeros((1, 64, 1)), g)[0, :, 0]
    np.testing.assert_allclose(mu, (1 - g.dt) ** np.arange(65), rtol=1e-13)
    assert np.max(np.abs(mu - np.exp(-g.times))) <= 5 * g.dt


def test_drift_long_run_mean():
    n = 100_000
    g = make_time_grid(10.0, 100)
    b = sample_brownian_bundle(g, (0, 1, 0), n, seed=31)
    params = of.ou_params(1, 1.0, 0.08, 0.1, m0=1.0, P0=0.0)
    last = of.simulate_ou_drift(params, b.dWbar[1], g)[:, -1, 0]
    assert abs(last.mean() - 0.08) <= 4 * last.std(ddof=1) / np.sqrt(n)


def test_drift_prior_draw_has_prior_moments():
    n = 50_000
    P0 = np.array([[0.04, 0.01], [0.01, 0.09]])
    params = of.ou_params(2, 1.0, 0.0, 0.0, m0=[0.1, 0.2], P0=P0)
    z = np.random.default_rng(0).standard_normal((n, 2))
    x = of.initial_drift(params, z)
    np.testing.assert_allclose(x.mean(axis=0), [0.1, 0.2], atol=4 * 0.3 / np.sqrt(n))
    np.testing.assert_allclose(np.cov(x.T), P0, atol=5 * 0.09 * np.sqrt(2 / n))


def test_drift_shape_mismatch():
    with pytest.raises(InvalidArgument):
        of.simulate_ou_drift(of.ou_params(2, 1.0, 0.0, 0.1), np.zeros((3, 8, 1)), make_time_grid(1.0, 8))


def test_zero_observation_drift_gives_brownian_path(rng):
    g = make_time_grid(1.0, 8)
    obs = of.observation_model(np.diag([0.2, 0.3]))
    mu = np.broadcast_to(0.5 * obs.A, (3, 9, 2))
    dW = rng.normal(size=(3, 8, 2)) * np.sqrt(g.dt)
    Y = of.synthesize_observations(mu, obs, dW, g)
    assert np.array_equal(Y[:, 1:], np.cumsum(dW, axis=1))


def test_observation_single_step():
    # scalar volatility 0.2 gives A = 0.04 and eta = (0.06 - 0.02) / 0.2
    g = make_time_grid(0.5, 2)
    obs = of.observation_model([[0.2]])
    Y = of.synthesize_observations(np.full((1, 3, 1), 0.06), obs, np.array([[[0.1], [0.0]]]), g)
    assert Y[0, 1, 0] == pytest.approx(0.2 * 0.25 + 0.1, abs=1e-15)


def test_observation_increment_formula():
    # eta dt + dW with the drift offset taken literally: (0.06 - 0.04 / 2) * 0.25 + 0.1
    eta = 0.06 - 0.5 * 0.04
    assert eta * 0.25 + 0.1 == pytest.approx(0.11, abs=1e-15)


def test_identity_volatility_stocks_are_observations(rng):
    dlog = rng.normal(size=(2, 5, 3))
    Y = of.stocks_to_observations(dlog, np.eye(3))
    np.testing.assert_array_equal(Y[:, 1:], np.cumsum(dlog, axis=1))


def test_stocks_hand_solve():
    Y = of.stocks_to_observations(np.array([[[0.2, 0.4]]]), np.array([[2.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_allclose(Y[0, 1], [0.1, 0.1], atol=1e-15)


def test_stocks_singular_sigma():
    with pytest.raises(InvalidArgument):
        of.stocks_to_observations(np.zeros((1, 2, 2)), np.zeros((2, 2)))


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_stock_route_equals_direct_route(seed, n):
    rng = np.random.default_rng(seed)
    g = make_time_grid(1.0, 64)
    sigma = rng.normal(size=(n, n)) * 0.1 + np.diag(rng.uniform(0.1, 0.5, n))
    obs = of.observation_model(sigma, 0.03)
    mu = rng.normal(0.08, 0.05, size=(20, 65, n))
    dW = rng.normal(size=(20, 64, n)) * np.sqrt(g.dt)
    direct = of.synthesize_observations(mu, obs, dW, g)
    via_stocks = of.stocks_to_observations(np.diff(of.simulate_log_stocks(mu, obs, dW, g), axis=1), sigma)
    assert np.max(np.abs(direct - via_stocks)) <= 1e-12


# ---- filter


def test_filter_without_uncertainty_is_exact():
    g = make_time_grid(1.0, 32)
    params = of.ou_params(1, 0.7, 0.1, 0.0, m0=0.1, P0=0.0)
    obs = of.observation_model([[0.2]], 0.02)
    b = sample_brownian_bundle(g, (0, 1, 0), 50, seed=2)
    mu = of.simulate_ou_drift(params, b.dWbar[1], g, b.init[1])
    Y = of.synthesize_observations(mu, obs, b.dW[1], g)
    out = of.run_kalman_bucy(Y, params, obs, of.solve_riccati(params, obs.sigma, g), g)
    assert np.array_equal(out.mu_hat, mu)
    assert np.max(np.abs(out.innovation - b.dW[1])) <= 1e-15


def test_filter_grid_mismatch():
    g = make_time_grid(1.0, 8)
    params = of.ou_params(1, 1.0, 0.0, 0.1)
    obs = of.observation_model([[0.2]])
    P = of.solve_riccati(params, obs.sigma, make_time_grid(1.0, 16))
    with pytest.raises(InvalidArgument):
        of.run_kalman_bucy(np.zeros((2, 9, 1)), params, obs, P, g)


def test_filter_consistency(default_state):
    idx = eq.probe_indices(default_state.grid)
    for i in (1, 2):
        rep = of.error_covariance_check(
            default_state.mu[i][:10_000], default_state.filters[i].mu_hat[:10_000],
            default_state.P[i], default_state.grid, idx,
        )
        assert rep.passed, rep.z


def test_filter_consistency_two_dimensional():
    g = make_time_grid(1.0, 64)
    params = of.ou_params(2, [1.0, 0.5], 0.05, [[0.2, 0.0], [0.1, 0.15]], m0=0.05, P0=0.01)
    obs = of.observation_model([[0.2, 0.05], [0.0, 0.3]], 0.02)
    b = sample_brownian_bundle(g, (0, 2, 0), 10_000, seed=17)
    mu = of.simulate_ou_drift(params, b.dWbar[1], g, b.init[1])
    Y = of.synthesize_observations(mu, obs, b.dW[1], g)
    out = of.run_kalman_bucy(Y, params, obs, of.solve_riccati(params, obs.sigma, g), g)
    rep = of.error_covariance_check(mu, out.mu_hat, out.P, g, eq.probe_indices(g))
    assert rep.passed, rep.z


def test_innovation_is_brownian(default_state):
    for i in (1, 2):
        assert of.innovation_check(default_state.filters[i].innovation, default_state.grid)["passed"]


def test_filtered_b_trivial_and_hand():
    g = make_time_grid(1.0, 4)
    assert np.all(of.filtered_b(np.full((2, 5, 1), 0.03), [[0.2]], 0.03, g) == 0)
    assert of.filtered_b(np.full((1, 5, 1), 0.10), [[2.0]], 0.02, g)[0, 0, 0] == pytest.approx(0.04)


def test_b_minus_eta_is_deterministic_offset(default_state):
    sc = default_state.scenario
    for i in (1, 2):
        obs = sc.obs(i)
        f = default_state.filters[i]
        offset = obs.sigma_inv @ (0.5 * obs.A - sc.r)
        np.testing.assert_allclose(f.b_hat - f.eta_hat, np.broadcast_to(offset, f.b_hat.shape), atol=1e-13)


@given(st.floats(-1.0, 1.0))
def test_conditional_covariance_offset_invariance(c):
    rng = np.random.default_rng(4)
    n = 4000
    y = rng.normal(size=n)
    x = y + rng.normal(size=n)
    p = np.exp(0.3 * y + 0.2 * rng.normal(size=n))
    feats = np.column_stack([y, y**2])
    a = eq.conditional_covariance(x + c, p, feats)
    b = eq.conditional_covariance(x, p, feats)
    np.testing.assert_allclose(a, b, atol=1e-9 * (1 + abs(c)))


def test_eta_and_b_share_conditional_covariance_with_adjoint(small_state):
    # b - eta is deterministic, so both pair identically with the adjoint given F^1
    j = small_state.grid.index_of(0.5)
    feats = eq.observation_features(small_state.Y[1], j, small_state.grid.dt)
    obs = small_state.scenario.obs(1)
    eta = of.eta_of(small_state.mu[1][:, j], obs)[:, 0]
    b = small_state.b[1][:, j, 0]
    p = small_state.p(1)[:, j]
    np.testing.assert_allclose(
        eq.conditional_covariance(eta, p, feats), eq.conditional_covariance(b, p, feats), atol=1e-10
    )


# ---- filtered adjoint


def test_adjoint_trivial():
    g = make_time_grid(1.0, 8)
    p = of.filtered_adjoint(np.zeros((3, 9, 1)), 0.0, 2.5, np.ones((3, 8, 1)), g)
    assert np.all(p == -2.5)


def test_adjoint_deterministic_discount():
    g = make_time_grid(2.0, 16)
    p = of.filtered_adjoint(np.zeros((1, 17, 1)), 0.04, 3.0, np.zeros((1, 16, 1)), g)[0]
    np.testing.assert_allclose(p, -3.0 * np.exp(-0.04 * g.times), rtol=1e-14)


def test_adjoint_negative(default_state):
    assert np.all(default_state.p_hat[1] < 0) and np.all(default_state.p_hat[2] < 0)


def test_adjoint_euler_deterministic_bound():
    # with b_hat = 0 the Euler product (1 - r dt)^n differs from e^{-rT} by at most r^2 T dt / 2
    r, M = 0.3, 2.0
    for n in (16, 64, 256):
        g = make_time_grid(1.0, n)
        zeros = np.zeros((1, n + 1, 1))
        closed = of.filtered_adjoint(zeros, r, M, zeros[:, 1:], g)[0, -1]
        euler = of.filtered_adjoint_euler(zeros, r, M, zeros[:, 1:], g)[0, -1]
        assert abs(euler - closed) / M <= r**2 * g.T * g.dt


def test_adjoint_euler_matches_closed_form_in_mean(default_scenario):
    # pathwise the Euler gap is O(sqrt dt); the weak gap is O(dt)
    from fbsde_game_lab import market_game as mg

    sc = default_scenario.with_paths(10_000, seed=3)
    gaps = {}
    for n in (32, 128):
        from dataclasses import replace

        st_ = mg.simulate_game(replace(sc, grid=make_time_grid(1.0, n)))
        f = st_.filters[1]
        closed = st_.p_hat[1]
        euler = of.filtered_adjoint_euler(f.b_hat, sc.r, sc.cost.M1, f.innovation, st_.grid)
        diff = euler[:, -1] - closed[:, -1]
        se = diff.std(ddof=1) / np.sqrt(diff.size)
        assert abs(diff.mean()) <= 4 * se + sc.cost.M1 * sc.r**2 * st_.grid.dt
        gaps[n] = np.sqrt(np.mean(diff**2))
    assert 0.35 <= gaps[128] / gaps[32] <= 0.7  # strong order one half


def test_discounted_adjoint_has_constant_mean(default_state):
    g = default_state.grid
    sc = default_state.scenario
    for i in (1, 2):
        x = default_state.p_hat[i] * np.exp(sc.r * g.times)
        for j in eq.probe_indices(g):
            se = x[:, j].std(ddof=1) / np.sqrt(x.shape[0])
            assert abs(x[:, j].mean() + sc.cost.M(i)) <= 4 * se
