"""Kalman-Bucy filtering of an unobserved Ornstein-Uhlenbeck appreciation rate.

Each observed block k carries stocks with log dynamics

    d log S = (mu - A/2) dt + Sigma dW,        A_i = sum_l sigma_il^2,

whose drift follows the OU equation ``dmu = theta (delta - mu) dt + zeta dWbar``.
Normalising by ``Sigma^{-1}`` turns the prices into the observation
``dY = eta dt + dW`` with ``eta = Sigma^{-1} (mu - A/2)``; the manager filters
``mu`` from ``Y`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .stochastic_core import (
    TimeGrid,
    _prepend_zero,
    as_increments,
    integrated_rate,
    rate_nodes,
    stochastic_exponential,
)

PSD_TOL = 1e-8


@dataclass(frozen=True)
class OUParams:
    """Drift model of one block. ``theta`` holds the diagonal of the reversion matrix."""

    theta: np.ndarray
    delta: np.ndarray
    zeta: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    @property
    def n(self) -> int:
        return self.delta.shape[0]


def ou_params(n, theta, delta, zeta, m0=None, P0=None) -> OUParams:
    """Build and validate an :class:`OUParams`.

    Scalars broadcast: ``theta``/``delta``/``m0`` to vectors, ``zeta``/``P0`` to
    multiples of the identity.  Prior defaults are ``m0 = 1`` and ``P0 = I``.
    """
    theta = _vector(theta, n, "theta")
    delta = _vector(delta, n, "delta")
    zeta = _matrix(zeta, n, "zeta")
    m0 = _vector(1.0 if m0 is None else m0, n, "m0")
    P0 = _matrix(np.eye(n) if P0 is None else P0, n, "P0")
    if np.any(theta < 0):
        raise InvalidArgument("theta entries must be nonnegative")
    if not np.allclose(P0, P0.T, atol=1e-12):
        raise InvalidArgument("P0 must be symmetric")
    if n and np.linalg.eigvalsh(P0).min() < -PSD_TOL:
        raise InvalidArgument("P0 must be positive semidefinite")
    return OUParams(theta, delta, zeta, m0, P0)


def _vector(x, n, name):
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise InvalidArgument(f"{name} must have {n} entries, got shape {v.shape}")
    return v


def _matrix(x, n, name):
    m = np.asarray(x, dtype=float)
    if m.ndim == 0:
        m = float(m) * np.eye(n)
    elif m.ndim == 1 and m.size == n * n:
        m = m.reshape(n, n)
    if m.shape != (n, n):
        raise InvalidArgument(f"{name} must be {n}x{n}, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class ObservationModel:
    sigma: np.ndarray
    r: object = 0.0

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def A(self) -> np.ndarray:
        return np.sum(self.sigma**2, axis=1)

    @property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)


def observation_model(sigma, r=0.0, n=None) -> ObservationModel:
    sigma = np.asarray(sigma, dtype=float)
    if n is not None:
        sigma = _matrix(sigma, n, "sigma")
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidArgument(f"sigma must be square, got shape {sigma.shape}")
    _check_invertible(sigma)
    return ObservationModel(sigma, r)


def _check_invertible(sigma):
    if sigma.size and (not np.all(np.isfinite(sigma)) or np.linalg.cond(sigma) > 1e12):
        raise InvalidArgument("volatility matrix is singular or ill-conditioned")


def _apply(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``mat @ x`` over the trailing axis of ``x``."""
    return x @ mat.T


@dataclass(frozen=True)
class FilterOutput:
    mu_hat: np.ndarray  # (n_paths, n_steps+1, n)
    P: np.ndarray  # (n_steps+1, n, n)
    innovation: np.ndarray  # (n_paths, n_steps, n)
    eta_hat: np.ndarray
    b_hat: np.ndarray


def solve_riccati(params: OUParams, sigma, grid: TimeGrid, substeps: int = 4) -> np.ndarray:
    """Error covariance of the filter.

    Integrates ``P' = zeta zeta^T - (theta P + P theta^T) - P S P`` with
    ``S = Sigma^{-T} Sigma^{-1}`` by classical RK4, ``substeps`` stages per grid
    step, symmetrising after every stage.  Returns ``(n_steps+1, n, n)``.
    """
    sigma = _matrix(sigma, params.n, "sigma")
    _check_invertible(sigma)
    s_inv = np.linalg.inv(sigma)
    S = s_inv.T @ s_inv
    Th = np.diag(params.theta)
    Q = params.zeta @ params.zeta.T

    def rhs(P):
        return Q - (Th @ P + P @ Th.T) - P @ S @ P

    h = grid.dt / substeps
    out = np.empty((grid.n_steps + 1, params.n, params.n))
    P = params.P0.copy()
    out[0] = P
    for j in range(grid.n_steps):
        # divergence is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(substeps):
                k1 = rhs(P)
                k2 = rhs(P + 0.5 * h * k1)
                k3 = rhs(P + 0.5 * h * k2)
                k4 = rhs(P + h * k3)
                P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise NumericalFailure("Riccati solution diverged", step=j + 1, t=(j + 1) * grid.dt)
        if params.n:
            lam = np.linalg.eigvalsh(P).min()
            if lam < -PSD_TOL * max(1.0, np.abs(P).max()):
                raise NumericalFailure(
                    "Riccati solution lost positive semidefiniteness",
                    step=j + 1, t=(j + 1) * grid.dt, min_eigenvalue=float(lam),
                )
        out[j + 1] = P
    return out


def _psd_sqrt(P):
    w, V = np.linalg.eigh(P)
    return V * np.sqrt(np.clip(w, 0.0, None))


def initial_drift(params: OUParams, init_normals=None, n_paths=None) -> np.ndarray:
    """Initial drift per path: ``m0`` or a draw from ``N(m0, P0)``."""
    if init_normals is None:
        return np.broadcast_to(params.m0, (n_paths or 1, params.n)).copy()
    z = np.asarray(init_normals, dtype=float)
    return params.m0 + z @ _psd_sqrt(params.P0).T


def simulate_ou_drift(params: OUParams, dWbar, grid: TimeGrid, init_normals=None) -> np.ndarray:
    """Euler path of ``dmu = theta (delta - mu) dt + zeta dWbar``.

    Without ``init_normals`` every path starts at ``m0``.
    """
    dWbar = as_increments(dWbar)
    n_paths, n_steps, n = dWbar.shape
    if n != params.n or n_steps != grid.n_steps:
        raise InvalidArgument(
            f"drift noise shape {dWbar.shape} does not match block dim {params.n} / {grid.n_steps} steps"
        )
    mu = np.empty((n_paths, n_steps + 1, n))
    mu[:, 0] = initial_drift(params, init_normals, n_paths)
    noise = _apply(params.zeta, dWbar)
    decay = params.theta * grid.dt
    for j in range(n_steps):
        mu[:, j + 1] = mu[:, j] + decay * (params.delta - mu[:, j]) + noise[:, j]
    return mu


def eta_of(mu, obs: ObservationModel) -> np.ndarray:
    return _apply(obs.sigma_inv, np.asarray(mu) - 0.5 * obs.A)


def synthesize_observations(mu, obs: ObservationModel, dW, grid: TimeGrid) -> np.ndarray:
    """``Y(0) = 0``, ``dY = eta dt + dW``."""
    dW = as_increments(dW)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (dW.shape[0], dW.shape[1] + 1, obs.n) or dW.shape[2] != obs.n:
        raise InvalidArgument(f"drift path {mu.shape} and noise {dW.shape} do not conform")
    eta = eta_of(mu[:, :-1], obs)
    return _prepend_zero(np.cumsum(eta * grid.dt + dW, axis=1))


def simulate_log_stocks(mu, obs: ObservationModel, dW, grid: TimeGrid) -> np.ndarray:
    """Euler path of ``log S`` from ``log S(0) = 0``."""
    dW = as_increments(dW)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (dW.shape[0], dW.shape[1] + 1, obs.n) or dW.shape[2] != obs.n:
        raise InvalidArgument(f"drift path {mu.shape} and noise {dW.shape} do not conform")
    steps = (mu[:, :-1] - 0.5 * obs.A) * grid.dt + _apply(obs.sigma, dW)
    return _prepend_zero(np.cumsum(steps, axis=1))


def stocks_to_observations(log_increments, sigma) -> np.ndarray:
    """``dY = Sigma^{-1} d log S``; returns the observation path with ``Y(0) = 0``."""
    dlog = as_increments(log_increments)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = sigma * np.eye(1)
    if sigma.shape != (dlog.shape[2], dlog.shape[2]):
        raise InvalidArgument(f"sigma {sigma.shape} does not match {dlog.shape[2]} stocks")
    _check_invertible(sigma)
    n_paths, n_steps, n = dlog.shape
    dY = np.linalg.solve(sigma, dlog.reshape(-1, n).T).T.reshape(n_paths, n_steps, n)
    return _prepend_zero(np.cumsum(dY, axis=1))


def filtered_b(mu_hat, sigma, r, grid: TimeGrid) -> np.ndarray:
    """``b_hat = Sigma^{-1} (mu_hat - r 1)`` at every node."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    r_nodes = rate_nodes(r, grid)
    if mu_hat.shape[-2] != grid.n_steps + 1:
        raise InvalidArgument("filtered mean must be given on every grid node")
    return _apply(np.linalg.inv(sigma), mu_hat - r_nodes[:, None])


def run_kalman_bucy(Y, params: OUParams, obs: ObservationModel, P, grid: TimeGrid) -> FilterOutput:
    """Euler-Maruyama integration of the Kalman-Bucy mean.

    ``dmu_hat = theta (delta - mu_hat) dt + P Sigma^{-T} dW_hat`` with innovation
    ``dW_hat = dY - eta_hat dt`` and ``mu_hat(0) = m0``.
    """
    Y = np.asarray(Y, dtype=float)
    P = np.asarray(P, dtype=float)
    if Y.ndim != 3 or Y.shape[1] != grid.n_steps + 1 or Y.shape[2] != params.n:
        raise InvalidArgument(f"observation path has shape {Y.shape}")
    if P.shape != (grid.n_steps + 1, params.n, params.n):
        raise InvalidArgument(f"covariance path has shape {P.shape}, grid needs {grid.n_steps + 1} nodes")
    dY = np.diff(Y, axis=1)
    s_inv = obs.sigma_inv
    gains = P @ s_inv.T
    half_a = 0.5 * obs.A
    dt = grid.dt
    mu_hat = np.empty_like(Y)
    innov = np.empty_like(dY)
    mu_hat[:, 0] = params.m0
    for j in range(grid.n_steps):
        m = mu_hat[:, j]
        eta_hat = _apply(s_inv, m - half_a)
        dw = dY[:, j] - eta_hat * dt
        innov[:, j] = dw
        mu_hat[:, j + 1] = m + params.theta * (params.delta - m) * dt + _apply(gains[j], dw)
    eta_hat = eta_of(mu_hat, obs)
    b_hat = filtered_b(mu_hat, obs.sigma, obs.r, grid)
    return FilterOutput(mu_hat, P, innov, eta_hat, b_hat)


def filtered_adjoint(b_hat, r, M: float, innovation, grid: TimeGrid) -> np.ndarray:
    """``p_hat(t) = -M exp{int (-r - |b_hat|^2/2) ds - int b_hat dW_hat}``."""
    discount = np.exp(-integrated_rate(r, grid))
    return -M * discount * stochastic_exponential(b_hat, innovation, grid.dt, sign=-1)


def filtered_adjoint_euler(b_hat, r, M: float, innovation, grid: TimeGrid) -> np.ndarray:
    """Euler scheme for ``dp = -r p dt - b_hat^T p dW_hat``, ``p(0) = -M``; cross-check only."""
    dW = as_increments(innovation)
    b = np.asarray(b_hat, dtype=float)
    if b.ndim == 2:
        b = b[:, :, None]
    if b.shape[:1] + b.shape[2:] != dW.shape[:1] + dW.shape[2:]:
        raise InvalidArgument(f"b_hat {b.shape} does not conform to innovation {dW.shape}")
    r_nodes = rate_nodes(r, grid)
    p = np.empty((dW.shape[0], grid.n_steps + 1))
    p[:, 0] = -M
    for j in range(grid.n_steps):
        shock = np.sum(b[:, j] * dW[:, j], axis=1)
        p[:, j + 1] = p[:, j] * (1.0 - r_nodes[j] * grid.dt - shock)
    return p


@dataclass(frozen=True)
class ConsistencyReport:
    """Empirical ``E[(mu - mu_hat)(mu - mu_hat)^T]`` against the Riccati ``P`` at probe nodes."""

    times: np.ndarray
    empirical: np.ndarray  # (n_probes, n, n)
    riccati: np.ndarray
    stderr: np.ndarray
    z: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= 5.0))


def error_covariance_check(mu, mu_hat, P, grid: TimeGrid, probe_idx) -> ConsistencyReport:
    idx = np.asarray(probe_idx)
    err = np.asarray(mu)[:, idx] - np.asarray(mu_hat)[:, idx]
    prod = err[:, :, :, None] * err[:, :, None, :]
    n_paths = prod.shape[0]
    emp = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.zeros_like(emp)
    ric = np.asarray(P)[idx]
    gap = emp - ric
    exact = np.abs(gap) <= 1e-12 * (1.0 + np.abs(ric))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(exact, 0.0, gap / np.where(se > 0, se, np.nan))
    z = np.where(np.isnan(z), np.inf, z)
    return ConsistencyReport(grid.times[idx], emp, ric, se, z)


def innovation_check(innovation, grid: TimeGrid) -> dict:
    """z-scores of the pooled innovation mean and variance against Brownian increments."""
    x = np.asarray(innovation).ravel()
    n = x.size
    mean_z = x.mean() / np.sqrt(grid.dt / n)
    var_z = (x.var() / grid.dt - 1.0) / np.sqrt(2.0 / n)
    return {"mean_z": float(mean_z), "var_z": float(var_z),
            "passed": bool(abs(mean_z) <= 4.0 and abs(var_z) <= 5.0)}
