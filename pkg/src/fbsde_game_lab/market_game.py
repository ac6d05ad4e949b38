"""The two-manager capital injection game.

A company's wealth solves the linear BSDE

    dy = [r y + sum_k b^k . z^k + I_1 + I_2] dt + sum_k z^k dW^k,   y(T) = xi,

with ``b^k = Sigma_k^{-1} (mu^k - r)``.  Manager i injects ``I_i >= 0`` using only
their own observation ``Y^i`` and pays

    J_i = E int_0^T L_i e^{-beta t} I_i^2 dt + M_i y(0).

Writing ``D`` for the deflator, ``y(0) = E[D(T) xi - int D (I_1 + I_2) dt]`` and
the adjoint of manager i is ``p_i = -M_i D``.  The equilibrium candidate is
``I_i = -e^{beta t} p_hat_i / (2 L_i)`` where ``p_hat_i`` is the filtered adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ou_filter as of
from .errors import ContractViolation, InvalidArgument
from .regression import fit_projection, independent_columns, poly_features
from .stochastic_core import (
    PathBundle,
    TimeGrid,
    _log_exponential,
    as_increments,
    integrated_rate,
    rate_nodes,
    sample_brownian_bundle,
)

PLAYERS = (1, 2)


@dataclass(frozen=True)
class CostParams:
    L1: float
    L2: float
    M1: float
    M2: float
    beta: float = 0.0

    def __post_init__(self):
        for name in ("L1", "L2", "M1", "M2"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.beta < 0:
            raise InvalidArgument("beta must be nonnegative")

    def L(self, i: int) -> float:
        return self.L1 if i == 1 else self.L2

    def M(self, i: int) -> float:
        return self.M1 if i == 1 else self.M2


@dataclass(frozen=True)
class TerminalClaim:
    """``xi = value`` or ``xi = value * (1 + tanh(sum of terminal Y)) / 2``.

    The function form sums the terminal observation values of ``blocks``;
    including block 0 makes the claim depend on noise neither manager sees.
    """

    kind: str = "constant"
    value: float = 1.0
    blocks: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.kind not in ("constant", "function"):
            raise InvalidArgument(f"terminal kind must be constant or function, got {self.kind!r}")
        if self.value < 0:
            raise InvalidArgument("terminal claim must be nonnegative")

    def evaluate(self, Y, n_paths: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n_paths, float(self.value))
        s = np.zeros(n_paths)
        for k in self.blocks:
            if Y[k] is not None:
                s += Y[k][:, -1].sum(axis=1)
        return self.value * 0.5 * (1.0 + np.tanh(s))

    @property
    def needs_full_filtration(self) -> bool:
        return self.kind == "function" and 0 in self.blocks


@dataclass(frozen=True)
class GameScenario:
    grid: TimeGrid
    dims: tuple[int, int, int]
    r: object
    sigma: tuple  # per block, (n_k, n_k)
    drift: tuple  # OUParams per block
    cost: CostParams
    terminal: TerminalClaim = TerminalClaim()
    n_paths: int = 10_000
    seed: int = 0

    def obs(self, k: int) -> of.ObservationModel:
        return of.ObservationModel(np.asarray(self.sigma[k], dtype=float), self.r)

    def with_paths(self, n_paths=None, seed=None) -> "GameScenario":
        from dataclasses import replace

        return replace(
            self,
            n_paths=self.n_paths if n_paths is None else int(n_paths),
            seed=self.seed if seed is None else int(seed),
        )


@dataclass
class StrategyProcess:
    """Injection process of one player on the grid nodes."""

    player: int
    kind: str  # "candidate" | "tabulated"
    values: np.ndarray  # (n_paths, n_steps+1)
    clipped: int = 0
    adapted: bool | None = None


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int
    running: float
    y0_part: float
    samples: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class WealthEstimate:
    y0: float
    stderr: float
    samples: np.ndarray = field(repr=False, default=None)
    raw: np.ndarray = field(repr=False, default=None)


@dataclass
class GameState:
    """Every simulated path of one scenario on one bundle."""

    scenario: GameScenario
    bundle: PathBundle
    mu: tuple
    Y: tuple
    b: tuple
    P: dict
    filters: dict
    D: np.ndarray
    p_hat: dict
    candidates: dict
    xi: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.scenario.grid

    def p(self, i: int) -> np.ndarray:
        return adjoint_p(self.scenario.cost.M(i), self.D)


def _stderr(samples: np.ndarray) -> float:
    n = samples.shape[0]
    return float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def deflator(r, b_blocks, dW_blocks, grid: TimeGrid) -> np.ndarray:
    """``D(t) = e^{-int r} exp{-sum_k int b^k dW^k - 1/2 sum_k int |b^k|^2}``, log-space."""
    log_d = -integrated_rate(r, grid)
    total = None
    for b, dW in zip(b_blocks, dW_blocks):
        if b is None or dW is None:
            continue
        dW = as_increments(dW)
        if dW.shape[2] == 0:
            continue
        if dW.shape[1] != grid.n_steps:
            raise InvalidArgument(f"increments have {dW.shape[1]} steps, grid has {grid.n_steps}")
        part = _log_exponential(b, dW, grid.dt, -1)
        total = part if total is None else total + part
    if total is None:
        return np.exp(log_d)[None, :]
    return np.exp(total + log_d)


def adjoint_p(M: float, D: np.ndarray) -> np.ndarray:
    if not M > 0:
        raise InvalidArgument(f"M must be positive, got {M}")
    return -M * np.asarray(D)


def adjoint_p_euler(M: float, r, b_blocks, dW_blocks, grid: TimeGrid) -> np.ndarray:
    """Euler scheme for ``dp = -r p dt - sum_k b^k p dW^k``, ``p(0) = -M``."""
    if not M > 0:
        raise InvalidArgument(f"M must be positive, got {M}")
    r_nodes = rate_nodes(r, grid)
    shocks = 0.0
    for b, dW in zip(b_blocks, dW_blocks):
        if b is None:
            continue
        dW = as_increments(dW)
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            b = b[:, :, None]
        shocks = shocks + np.sum(b[:, :-1] * dW, axis=2)
    shocks = np.broadcast_to(shocks, (np.shape(shocks)[0] if np.ndim(shocks) else 1, grid.n_steps))
    p = np.empty((shocks.shape[0], grid.n_steps + 1))
    p[:, 0] = -M
    for j in range(grid.n_steps):
        p[:, j + 1] = p[:, j] * (1.0 - r_nodes[j] * grid.dt - shocks[:, j])
    return p


def candidate_strategy(p_hat, L: float, beta: float, grid: TimeGrid, player: int = 1) -> StrategyProcess:
    """``I(t) = -e^{beta t} p_hat(t) / (2 L)``."""
    if not L > 0:
        raise InvalidArgument(f"L must be positive, got {L}")
    values = -0.5 * np.exp(beta * grid.times) * np.asarray(p_hat) / L
    return StrategyProcess(player, "candidate", values, adapted=True)


def tabulated_strategy(player: int, rule, Y: np.ndarray, grid: TimeGrid) -> StrategyProcess:
    """Evaluate ``rule(Y[:, :j+1], t_j)`` node by node; negative values are clamped to 0."""
    n_paths = Y.shape[0]
    values = np.empty((n_paths, grid.n_steps + 1))
    for j, t in enumerate(grid.times):
        values[:, j] = rule(Y[:, : j + 1], t)
    neg = values < 0
    values[neg] = 0.0
    return StrategyProcess(player, "tabulated", values, clipped=int(neg.sum()))


def _values(strategy) -> np.ndarray:
    if isinstance(strategy, StrategyProcess):
        if strategy.adapted is False:
            raise ContractViolation(f"strategy of player {strategy.player} failed the adaptedness audit")
        return strategy.values
    return np.asarray(strategy, dtype=float)


def _as_path(x, n_paths, grid) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = np.full(grid.n_steps + 1, float(x))
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != grid.n_steps + 1:
        raise InvalidArgument(f"path has {x.shape[1]} nodes, grid has {grid.n_steps + 1}")
    return np.broadcast_to(x, (n_paths, grid.n_steps + 1))


def wealth_samples(D, xi, strategies, grid: TimeGrid, signs=(1.0, 1.0)) -> np.ndarray:
    """Per-path ``D(T) xi - int_0^T D (s_1 I_1 + s_2 I_2) dt`` (left-point sum)."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n_paths = max(D.shape[0], np.size(xi) if np.ndim(xi) else 1)
    for s in strategies:
        v = _values(s)
        if np.ndim(v) == 2:
            n_paths = max(n_paths, v.shape[0])
    D = _as_path(D, n_paths, grid)
    inject = np.zeros((n_paths, grid.n_steps + 1))
    for sgn, s in zip(signs, strategies):
        v = _as_path(_values(s), n_paths, grid)
        if np.any(v < 0):
            raise InvalidArgument("injections must be nonnegative")
        inject = inject + sgn * v
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (n_paths,))
    return D[:, -1] * xi - np.sum(D[:, :-1] * inject[:, :-1], axis=1) * grid.dt


def deflator_controls(D, r, grid: TimeGrid) -> np.ndarray:
    """Centred ``D(T)`` and ``int D dt`` per path.

    Each Euler step of the deflator multiplies by a factor with conditional
    mean ``e^{-r dt}``, so ``E D(t_j) = e^{-int_0^{t_j} r}`` holds exactly on the
    grid and both columns have mean zero.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    mean_d = np.exp(-integrated_rate(r, grid))
    return np.column_stack([
        D[:, -1] - mean_d[-1],
        (D[:, :-1] - mean_d[:-1]).sum(axis=1) * grid.dt,
    ])


def wealth_y0(D, xi, strategies, grid: TimeGrid, signs=(1.0, 1.0), r=None) -> WealthEstimate:
    """Start-up capital via the deflator representation of the wealth BSDE.

    With the short rate ``r`` given, the deflator's known means serve as
    control variates; ``samples`` are then the adjusted per-path values
    (same mean as the estimate) and ``raw`` the plain ones.
    """
    raw = wealth_samples(D, xi, strategies, grid, signs)
    samples = raw
    n_controls = 0
    if r is not None and raw.shape[0] > 10:
        C = _as_path(D, raw.shape[0], grid)
        C = deflator_controls(C, r, grid)
        C = C[:, C.std(axis=0) > 1e-14]
        if C.shape[1]:
            A = np.column_stack([np.ones(raw.shape[0]), C])
            coef, *_ = np.linalg.lstsq(A, raw, rcond=None)
            samples = raw - C @ coef[1:]
            n_controls = C.shape[1]
    n = samples.shape[0]
    stderr = float(samples.std(ddof=1 + n_controls) / np.sqrt(n)) if n > 1 + n_controls else 0.0
    return WealthEstimate(float(np.mean(samples)), stderr, samples, raw)


def running_cost_samples(values, L: float, beta: float, grid: TimeGrid) -> np.ndarray:
    """Per-path ``int_0^T L e^{-beta t} I^2 dt`` by left-point sums."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    w = L * np.exp(-beta * grid.times[:-1]) * grid.dt
    return (v[:, :-1] ** 2) @ w


def cost_functional(cost: CostParams, player: int, strategy, y0: WealthEstimate, grid: TimeGrid) -> CostEstimate:
    """``J_i = E int L_i e^{-beta t} I_i^2 dt + M_i y(0)`` with its decomposition."""
    running = running_cost_samples(_values(strategy), cost.L(player), cost.beta, grid)
    y0_samples = np.broadcast_to(np.asarray(y0.samples if y0.samples is not None else y0.y0), running.shape)
    samples = running + cost.M(player) * y0_samples
    return CostEstimate(
        mean=float(np.mean(samples)),
        stderr=_stderr(samples),
        n_paths=samples.shape[0],
        running=float(np.mean(running)),
        y0_part=cost.M(player) * y0.y0,
        samples=samples,
    )


def girsanov_cost(Z, running, grid: TimeGrid, terminal=0.0, gamma=0.0) -> CostEstimate:
    """``J = E[int Z l dt + Z(T) Phi + gamma(y(0))]`` under the reference measure.

    ``running`` holds ``l`` on the nodes, ``terminal`` is ``Phi`` per path and
    ``gamma`` the already evaluated initial-value term.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    running = np.atleast_2d(np.asarray(running, dtype=float))
    n_paths = max(Z.shape[0], running.shape[0])
    Z = _as_path(Z, n_paths, grid)
    running = _as_path(running, n_paths, grid)
    run = np.sum(Z[:, :-1] * running[:, :-1], axis=1) * grid.dt
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (n_paths,))
    samples = run + Z[:, -1] * np.broadcast_to(terminal, (n_paths,)) + gamma
    return CostEstimate(
        mean=float(np.mean(samples)),
        stderr=_stderr(samples),
        n_paths=n_paths,
        running=float(np.mean(run)),
        y0_part=float(np.mean(gamma)),
        samples=samples,
    )


def hamiltonian_example(y, z, I1, I2, p, r, b, L, beta, t, player=1):
    """``(r y + sum_k b^k . z^k + I_1 + I_2) p + L e^{-beta t} I_player^2``.

    ``z`` and ``b`` are sequences over blocks (scalars or vectors each).
    """
    bz = sum(np.sum(np.asarray(bk) * np.asarray(zk), axis=-1) for bk, zk in zip(b, z))
    own = I1 if player == 1 else I2
    return (r * y + bz + I1 + I2) * p + L * np.exp(-beta * t) * own**2


def hamiltonian_example_grad(p, I, L, beta, t):
    """``dH_i/dI_i = p_i + 2 L_i e^{-beta t} I_i``."""
    return p + 2.0 * L * np.exp(-beta * t) * I


def hamiltonian_general(
    *,
    b=0.0, sigma=0.0, sigma_j=(0.0, 0.0), h_j=(0.0, 0.0), f=0.0, l=0.0,
    q=0.0, k=0.0, k_j=(0.0, 0.0), Q_j=(0.0, 0.0), p=0.0, z_j=(0.0, 0.0),
):
    """``b q + sigma k + sum_j [sigma_j k_j + h_j Q_j] - [f - sum_j h_j z_j] p + l``."""
    obs = sum(sj * kj + hj * Qj for sj, kj, hj, Qj in zip(sigma_j, k_j, h_j, Q_j))
    hz = sum(hj * zj for hj, zj in zip(h_j, z_j))
    return b * q + sigma * k + obs - (f - hz) * p + l


def tilde_h_gradient(h_grad, q, sigma_j, h_jv):
    """``H_v - sum_j q sigma_j h_{j,v}``; equals ``H_v`` when observations are control free."""
    return h_grad - sum(q * sj * hj for sj, hj in zip(sigma_j, h_jv))


def simulate_game(scenario: GameScenario, bundle: PathBundle | None = None, zero_sum: bool = False) -> GameState:
    """Drifts, observations, filters, deflator and candidates on one bundle.

    In ``zero_sum`` mode both candidates use ``M1`` (player 2 maximises
    ``J = J_1``).
    """
    grid = scenario.grid
    if bundle is None:
        bundle = sample_brownian_bundle(grid, scenario.dims, scenario.n_paths, scenario.seed)
    if bundle.dims != tuple(scenario.dims) or bundle.grid != grid:
        raise InvalidArgument("bundle does not match scenario grid/dims")
    n_paths = bundle.n_paths
    mu, Y, b = [None] * 3, [None] * 3, [None] * 3
    for k, n_k in enumerate(scenario.dims):
        if n_k == 0:
            continue
        params = scenario.drift[k]
        obs = scenario.obs(k)
        mu[k] = of.simulate_ou_drift(params, bundle.dWbar[k], grid, bundle.init[k])
        Y[k] = of.synthesize_observations(mu[k], obs, bundle.dW[k], grid)
        b[k] = of.filtered_b(mu[k], obs.sigma, scenario.r, grid)
    P, filters, p_hat, cands = {}, {}, {}, {}
    D = deflator(scenario.r, b, bundle.dW, grid)
    for i in PLAYERS:
        M = scenario.cost.M1 if zero_sum else scenario.cost.M(i)
        params = scenario.drift[i]
        obs = scenario.obs(i)
        P[i] = of.solve_riccati(params, obs.sigma, grid)
        if scenario.dims[i] == 0:
            Yi = np.zeros((n_paths, grid.n_steps + 1, 0))
        else:
            Yi = Y[i]
        filters[i] = of.run_kalman_bucy(Yi, params, obs, P[i], grid)
        p_hat[i] = of.filtered_adjoint(filters[i].b_hat, scenario.r, M, filters[i].innovation, grid)
        cands[i] = candidate_strategy(p_hat[i], scenario.cost.L(i), scenario.cost.beta, grid, i)
    xi = scenario.terminal.evaluate(Y, n_paths)
    return GameState(scenario, bundle, tuple(mu), tuple(Y), tuple(b), P, filters,
                     np.broadcast_to(D, (n_paths, grid.n_steps + 1)), p_hat, cands, xi)


def state_wealth_y0(state: GameState, strategies=None, signs=(1.0, 1.0)) -> WealthEstimate:
    strategies = strategies or (state.candidates[1], state.candidates[2])
    return wealth_y0(state.D, state.xi, strategies, state.grid, signs, r=state.scenario.r)


def equilibrium_costs(state: GameState, strategies=None) -> dict:
    """``{i: CostEstimate}`` for both players under ``strategies`` (default: candidates)."""
    strategies = strategies or (state.candidates[1], state.candidates[2])
    y0 = state_wealth_y0(state, strategies)
    return {i: cost_functional(state.scenario.cost, i, strategies[i - 1], y0, state.grid) for i in PLAYERS}


@dataclass(frozen=True)
class LSMCResult:
    y0: float
    stderr: float
    y: np.ndarray = field(repr=False)
    z: tuple = field(repr=False)
    max_condition: float = 1.0


def lsmc_linear_bsde(grid: TimeGrid, r, b_blocks, dW_blocks, xi, injection, state_vars, degree=2) -> LSMCResult:
    """Backward regression solve of ``dy = [r y + b.z + inj] dt + z dW``, ``y(T) = xi``.

    Multistep scheme: at step j the target is ``xi`` minus the realised future
    drivers; ``y_j`` regresses it on polynomial features of ``state_vars[:, j]``
    and ``z_j`` regresses the centred target times ``dW_j / dt``.
    """
    dt = grid.dt
    n = grid.n_steps
    r_nodes = rate_nodes(r, grid)
    xi = np.asarray(xi, dtype=float)
    n_paths = xi.shape[0]
    injection = _as_path(injection, n_paths, grid)
    blocks = [(np.asarray(bk), as_increments(dWk)) for bk, dWk in zip(b_blocks, dW_blocks)
              if bk is not None and as_increments(dWk).shape[2] > 0]
    y = np.empty((n_paths, n + 1))
    z = [np.zeros((n_paths, n, dWk.shape[2])) for _, dWk in blocks]
    y[:, n] = xi
    future = np.zeros(n_paths)
    max_cond = 1.0
    u0 = None
    for j in range(n - 1, -1, -1):
        target = xi - future
        if degree == 0:
            X = np.zeros((n_paths, 0))
        else:
            X = poly_features(independent_columns(state_vars[:, j]), degree)[:, 1:]
        proj = fit_projection(X, target)
        max_cond = max(max_cond, proj.condition)
        base = proj.predict(X)
        resid = target - base
        bz = np.zeros(n_paths)
        if blocks:
            rhs = np.concatenate([resid[:, None] * dWk[:, j] for _, dWk in blocks], axis=1) / dt
            fitted = proj.project_sample(rhs)
            start = 0
            for (bk, dWk), zk in zip(blocks, z):
                width = dWk.shape[2]
                zk[:, j] = fitted[:, start:start + width]
                start += width
                bz += np.sum(bk[:, j] * zk[:, j], axis=1)
        shift = (bz + injection[:, j]) * dt
        y[:, j] = (base - shift) / (1.0 + r_nodes[j] * dt)
        if j == 0:
            u0 = (target - shift) / (1.0 + r_nodes[0] * dt)
        future = future + (r_nodes[j] * y[:, j] + bz + injection[:, j]) * dt
    return LSMCResult(float(np.mean(u0)), _stderr(u0), y, tuple(z), max_cond)


def lsmc_state_vars(state: GameState, strategies) -> np.ndarray:
    """Markov state on every node: true drifts, filtered drifts, injections, terminal-relevant Y."""
    cols = []
    for k in range(3):
        if state.mu[k] is not None:
            cols.append(state.mu[k])
    for i in PLAYERS:
        if state.scenario.dims[i]:
            cols.append(state.filters[i].mu_hat)
    for s in strategies:
        cols.append(_as_path(_values(s), state.bundle.n_paths, state.grid)[:, :, None])
    if state.scenario.terminal.kind == "function":
        for k in state.scenario.terminal.blocks:
            if state.Y[k] is not None:
                cols.append(state.Y[k])
    return np.concatenate(cols, axis=2)


def lsmc_bsde_solve(state: GameState, strategies=None, basis: str = "quadratic") -> LSMCResult:
    """Regression solve of the wealth BSDE; validates :func:`wealth_y0`.

    ``basis`` is ``"quadratic"`` (default), ``"linear"`` or ``"constant"``.
    """
    degrees = {"constant": 0, "linear": 1, "quadratic": 2}
    if basis not in degrees:
        raise InvalidArgument(f"unknown basis {basis!r}")
    strategies = strategies or (state.candidates[1], state.candidates[2])
    injection = sum(_as_path(_values(s), state.bundle.n_paths, state.grid) for s in strategies)
    X = lsmc_state_vars(state, strategies)
    return lsmc_linear_bsde(state.grid, state.scenario.r, state.b, state.bundle.dW,
                            state.xi, injection, X, degrees[basis])
