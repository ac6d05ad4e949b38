"""Numerical certification of the open-loop Nash equilibrium.

Three independent angles on the candidate pair:

* stationarity of the Hamiltonian in the own control, conditionally on the
  player's observations (closed form through the filtered adjoint, and by
  regressing the unfiltered adjoint on observation features);
* unilateral deviations ``I_i + eps v`` with common random numbers, whose
  cost change must be a nonnegative quadratic in ``eps`` centred at zero;
* convexity of the Hamiltonians along random segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import market_game as mg
from .errors import InvalidArgument
from .regression import fit_projection, poly_features
from .stochastic_core import resample_after, resample_blocks

DEFAULT_EPS = (-0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2)
DEFAULT_PROBES = (0.2, 0.4, 0.6, 0.8, 1.0)
LAW_REL_FLOOR = 1e-10  # deterministic directions give a curvature with no sampling error


# ---------------------------------------------------------------- regression


def observation_features(Y: np.ndarray, j: int, dt: float, degree: int = 2) -> np.ndarray:
    """Degree-``degree`` monomials of ``(Y(t_j), int_0^{t_j} Y ds)``; uses nodes ``<= j`` only."""
    Y = np.asarray(Y, dtype=float)
    level = Y[:, j]
    area = Y[:, :j].sum(axis=1) * dt
    return poly_features(np.concatenate([level, area], axis=1), degree)[:, 1:]


@dataclass
class ConditionalEstimate:
    fitted: np.ndarray
    stderr: np.ndarray
    coef: np.ndarray
    r2: float
    condition: float
    n_features: int


def conditional_expectation(target, features, extra=None) -> ConditionalEstimate:
    """Least-squares proxy for ``E[target | F^i_t]``.

    ``features`` must be measurable with respect to the player's observations
    up to ``t``; ``extra`` appends further such columns.
    """
    target = np.asarray(target, dtype=float)
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if extra is not None:
        extra = np.asarray(extra, dtype=float)
        X = np.concatenate([X, extra.reshape(X.shape[0], -1)], axis=1)
    if target.shape[0] < 10 * (X.shape[1] + 1):
        raise InvalidArgument(
            f"{target.shape[0]} samples are too few for {X.shape[1] + 1} features (need 10x)"
        )
    proj = fit_projection(X, target)
    return ConditionalEstimate(
        fitted=proj.predict(X),
        stderr=proj.fitted_stderr(X),
        coef=proj.coef,
        r2=proj.r2,
        condition=proj.condition,
        n_features=proj.n_features,
    )


def conditional_covariance(x, p, features) -> np.ndarray:
    """Regression estimate of ``E[x p | F] - E[x | F] E[p | F]`` per path."""
    fit = lambda v: conditional_expectation(v, features).fitted
    return fit(np.asarray(x) * np.asarray(p)) - fit(x) * fit(p)


# ---------------------------------------------------------- MP stationarity


@dataclass
class MPResidualReport:
    player: int
    probe_times: np.ndarray
    closed_form: np.ndarray  # max over paths of |p_hat + 2 L e^{-beta t} I|
    closed_form_tol: float
    regression: np.ndarray  # RMS of the regressed E[dH/dI | F^i]
    regression_stderr: np.ndarray
    discretization_bound: np.ndarray
    r2: np.ndarray = field(default=None)

    @property
    def closed_form_ok(self) -> bool:
        return bool(np.all(self.closed_form <= self.closed_form_tol))

    @property
    def regression_ok(self) -> bool:
        return bool(np.all(self.regression <= 5.0 * (self.regression_stderr + self.discretization_bound)))

    @property
    def passed(self) -> bool:
        return self.closed_form_ok and self.regression_ok


def probe_indices(grid, probe_times=None) -> np.ndarray:
    if probe_times is None:
        probe_times = [f * grid.T for f in DEFAULT_PROBES]
    return np.array([grid.index_of(t) for t in probe_times])


def mp_residual(state: mg.GameState, strategies=None, probe_times=None, player: int = 1) -> MPResidualReport:
    """Conditional stationarity of ``dH_i/dI_i = p_i + 2 L_i e^{-beta t} I_i``.

    The closed-form channel uses the filtered adjoint and vanishes exactly at
    the candidate.  The regression channel projects the same gradient built
    from the *unfiltered* adjoint onto observation features of player i; the
    O(dt) allowance is ``dt * mean |p_hat_i(t)|``.
    """
    strategies = strategies or (state.candidates[1], state.candidates[2])
    grid = state.grid
    cost = state.scenario.cost
    L, beta = cost.L(player), cost.beta
    I = mg._values(strategies[player - 1])
    I = mg._as_path(I, state.bundle.n_paths, grid)
    p_hat = state.p_hat[player]
    p = state.p(player)
    idx = probe_indices(grid, probe_times)
    Y = state.Y[player]
    closed, reg, reg_se, bound, r2 = [], [], [], [], []
    for j in idx:
        t = grid.times[j]
        grad_closed = mg.hamiltonian_example_grad(p_hat[:, j], I[:, j], L, beta, t)
        closed.append(np.max(np.abs(grad_closed)))
        grad = mg.hamiltonian_example_grad(p[:, j], I[:, j], L, beta, t)
        if Y is None:
            X = np.zeros((grad.shape[0], 0))
        else:
            X = observation_features(Y, j, grid.dt)
        est = conditional_expectation(grad, X, extra=I[:, j])
        reg.append(np.sqrt(np.mean(est.fitted**2)))
        reg_se.append(np.sqrt(np.mean(est.stderr**2)))
        bound.append(grid.dt * np.mean(np.abs(p_hat[:, j])))
        r2.append(est.r2)
    tol = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(p_hat))))
    return MPResidualReport(
        player, grid.times[idx], np.array(closed), tol,
        np.array(reg), np.array(reg_se), np.array(bound), np.array(r2),
    )


# ------------------------------------------------------- deviation testing


def cost_samples(state: mg.GameState, I1, I2, player: int, zero_sum: bool = False) -> np.ndarray:
    """Per-path cost of ``player``; in ``zero_sum`` mode the common ``J = J_1`` of the saddle game.

    The zero-sum game lets manager 2 withdraw (``dy`` gets ``I_1 - I_2``) and
    reward themself with ``L_2 e^{-beta t} I_2^2``, so ``J`` is convex in
    ``I_1`` and concave in ``I_2``.
    """
    grid = state.grid
    c = state.scenario.cost
    if zero_sum:
        wealth = mg.wealth_samples(state.D, state.xi, (I1, I2), grid, signs=(1.0, -1.0))
        return (mg.running_cost_samples(I1, c.L1, c.beta, grid)
                - mg.running_cost_samples(I2, c.L2, c.beta, grid)
                + c.M1 * wealth)
    wealth = mg.wealth_samples(state.D, state.xi, (I1, I2), grid)
    own = I1 if player == 1 else I2
    return mg.running_cost_samples(own, c.L(player), c.beta, grid) + c.M(player) * wealth


@dataclass
class DeviationReport:
    player: int
    name: str
    eps: np.ndarray
    delta_J: np.ndarray
    stderr: np.ndarray
    coef: np.ndarray  # a0 + a1 eps + a2 eps^2
    coef_stderr: np.ndarray
    clipped: int
    direction: int = 1  # +1: own cost must not drop, -1: must not rise
    expected_quadratic: float | None = None
    expected_quadratic_stderr: float = 0.0

    @property
    def spacing(self) -> float:
        e = np.unique(self.eps)
        return float(np.min(np.diff(e)))

    @property
    def eps_star(self) -> float:
        a2 = self.coef[2]
        return float(-self.coef[1] / (2 * a2)) if a2 != 0 else np.inf

    @property
    def sign_ok(self) -> bool:
        return bool(np.all(self.direction * self.delta_J >= -3.0 * self.stderr))

    @property
    def minimum_ok(self) -> bool:
        return bool(self.direction * self.coef[2] > 0 and abs(self.eps_star) <= self.spacing)

    @property
    def law_z(self) -> float:
        """Gap between fitted and expected curvature in combined standard errors."""
        if self.expected_quadratic is None:
            return 0.0
        se = np.hypot(self.coef_stderr[2], self.expected_quadratic_stderr)
        se = max(se, LAW_REL_FLOOR * abs(self.expected_quadratic))
        gap = abs(self.coef[2] - self.expected_quadratic)
        return float(gap / se) if se > 0 else (0.0 if gap == 0 else np.inf)

    @property
    def law_ok(self) -> bool:
        return self.law_z <= 3.0

    @property
    def passed(self) -> bool:
        return self.sign_ok and self.minimum_ok and self.law_ok


def _fit_quadratic(eps, samples):
    """Per-path quadratic fit in eps; returns (coef mean, coef stderr)."""
    V = np.vander(eps, 3, increasing=True)
    W = np.linalg.pinv(V)
    per_path = samples @ W.T
    n = per_path.shape[0]
    return per_path.mean(axis=0), per_path.std(axis=0, ddof=1) / np.sqrt(n)


def _deviation_values(state, player, deviation):
    v = deviation(state, player) if callable(deviation) else deviation
    return mg._as_path(mg._values(v), state.bundle.n_paths, state.grid)


def default_eps_grid(state: mg.GameState, player: int, strategies=None) -> np.ndarray:
    strategies = strategies or (state.candidates[1], state.candidates[2])
    scale = float(np.mean(mg._values(strategies[player - 1])))
    return np.array(DEFAULT_EPS) * scale


def nash_deviation_test(
    state: mg.GameState, strategies=None, player: int = 1, deviation=None, eps=None,
    name: str = "", cost_player: int | None = None, zero_sum: bool = False, direction: int = 1,
) -> DeviationReport:
    """Cost change of ``cost_player`` when ``player`` plays ``I + eps v``.

    All eps share the same paths, so ``delta_J(0) = 0`` exactly.  Perturbed
    injections are clipped at zero and the number of clipped nodes reported.
    """
    strategies = strategies or (state.candidates[1], state.candidates[2])
    cost_player = cost_player or player
    grid = state.grid
    n_paths = state.bundle.n_paths
    base = [mg._as_path(mg._values(s), n_paths, grid) for s in strategies]
    v = _deviation_values(state, player, deviation if deviation is not None else np.ones(grid.n_steps + 1))
    eps = default_eps_grid(state, player, strategies) if eps is None else np.asarray(eps, dtype=float)
    if not np.any(eps == 0.0):
        raise InvalidArgument("eps grid must contain 0")
    J0 = cost_samples(state, base[0], base[1], cost_player, zero_sum)
    deltas = np.empty((n_paths, len(eps)))
    clipped = 0
    for m, e in enumerate(eps):
        pert = base[player - 1] + e * v
        neg = pert < 0
        clipped += int(neg.sum())
        pert = np.where(neg, 0.0, pert)
        pair = (pert, base[1]) if player == 1 else (base[0], pert)
        deltas[:, m] = cost_samples(state, *pair, cost_player, zero_sum) - J0
    coef, coef_se = _fit_quadratic(eps, deltas)
    return DeviationReport(
        player=player, name=name, eps=eps,
        delta_J=deltas.mean(axis=0),
        stderr=deltas.std(axis=0, ddof=1) / np.sqrt(n_paths),
        coef=coef, coef_stderr=coef_se, clipped=clipped, direction=direction,
    )


def default_deviations() -> dict:
    """Constant, decaying and observation-driven directions, all bounded by 1."""
    return {
        "constant": lambda state, i: np.ones(state.grid.n_steps + 1),
        "exp_decay": lambda state, i: np.exp(-state.grid.times),
        "tanh_obs": _tanh_obs,
    }


def _tanh_obs(state, i):
    Y = state.Y[i]
    if Y is None:
        return np.zeros((state.bundle.n_paths, state.grid.n_steps + 1))
    return np.tanh(Y.sum(axis=2))


def quadratic_term(state: mg.GameState, player: int, deviation) -> tuple[float, float]:
    """``E int L_i e^{-beta t} v^2 dt`` and its standard error, straight from ``v``."""
    grid = state.grid
    c = state.scenario.cost
    v = _deviation_values(state, player, deviation)
    w = c.L(player) * np.exp(-c.beta * grid.times[:-1]) * grid.dt
    samples = (v[:, :-1] ** 2) @ w
    n = samples.shape[0]
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), se


def certify_deviation(state, fresh_state, player, deviation, name="", strategies=None, eps=None):
    """Deviation test plus the curvature law checked against a fresh sample."""
    report = nash_deviation_test(state, strategies, player, deviation, eps, name)
    q, q_se = quadratic_term(fresh_state, player, deviation)
    report.expected_quadratic, report.expected_quadratic_stderr = q, q_se
    return report


@dataclass
class SaddleReport:
    minimiser: DeviationReport
    maximiser: DeviationReport

    @property
    def passed(self) -> bool:
        return self.minimiser.sign_ok and self.maximiser.sign_ok


def saddle_check(state: mg.GameState, strategies=None, deviation1=None, deviation2=None,
                 eps1=None, eps2=None, sign: int = 1) -> SaddleReport:
    """``J(u_1, v_2) <= J(u_1, u_2) <= J(v_1, u_2)`` on the eps grids.

    ``state`` should be simulated with ``zero_sum=True``.  ``sign = -1``
    swaps the roles (player 1 maximising), which must flip both verdicts.
    """
    if sign not in (1, -1):
        raise InvalidArgument("sign must be +1 or -1")
    r1 = nash_deviation_test(state, strategies, 1, deviation1, eps1, "player1", 1, True, sign)
    r2 = nash_deviation_test(state, strategies, 2, deviation2, eps2, "player2", 1, True, -sign)
    return SaddleReport(r1, r2)


# --------------------------------------------------------------- convexity


@dataclass
class ConvexityReport:
    n_probes: int
    min_second_difference: float
    by_direction: dict
    tol: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.min_second_difference >= -self.tol


def example_hamiltonian_fn(point: dict) -> float:
    return mg.hamiltonian_example(
        point["y"], point["z"], point["I1"], point["I2"], point["p"], point["r"],
        point["b"], point["L"], point["beta"], point["t"], point["player"],
    )


def _random_point(rng, scenario, player):
    dims = scenario.dims if scenario is not None else (1, 1, 1)
    c = scenario.cost if scenario is not None else mg.CostParams(1.0, 1.0, 1.0, 1.0, 0.05)
    T = scenario.grid.T if scenario is not None else 1.0
    return {
        "y": rng.normal(),
        "z": [rng.normal(size=n) for n in dims],
        "b": [rng.normal(size=n) for n in dims],
        "I1": abs(rng.normal()),
        "I2": abs(rng.normal()),
        "p": -abs(rng.normal()) * c.M(player),
        "r": abs(rng.normal()) * 0.05,
        "L": c.L(player),
        "beta": c.beta,
        "t": rng.uniform(0, T),
        "player": player,
    }


def _shift(point, direction, h):
    out = dict(point)
    for key, d in direction.items():
        if key == "z":
            out["z"] = [z + h * dz for z, dz in zip(point["z"], d)]
        else:
            out[key] = point[key] + h * d
    return out


def convexity_check(scenario=None, n_probes: int = 200, seed: int = 0, hamiltonian=None) -> ConvexityReport:
    """Second differences of the Hamiltonians along random segments in (y, z, I_1, I_2)."""
    hamiltonian = hamiltonian or example_hamiltonian_fn
    rng = np.random.default_rng(seed)
    mins = {}
    for _ in range(n_probes):
        for player in mg.PLAYERS:
            x = _random_point(rng, scenario, player)
            h = abs(rng.normal()) + 0.1
            directions = {
                "own_control": {f"I{player}": 1.0},
                "other_control": {f"I{3 - player}": 1.0},
                "y": {"y": 1.0},
                "z": {"z": [rng.normal(size=np.size(z)) for z in x["z"]]},
                "joint": {
                    "y": rng.normal(), "I1": rng.normal(), "I2": rng.normal(),
                    "z": [rng.normal(size=np.size(z)) for z in x["z"]],
                },
            }
            for name, d in directions.items():
                second = (hamiltonian(_shift(x, d, h)) - 2 * hamiltonian(x)
                          + hamiltonian(_shift(x, d, -h)))
                mins[name] = min(mins.get(name, np.inf), float(second))
    return ConvexityReport(n_probes, min(mins.values()), mins)


# -------------------------------------------------------------- adaptedness


@dataclass
class AuditReport:
    player: int
    cross_block_identical: bool
    non_anticipating: bool
    max_abs_change: float
    cut_steps: tuple

    @property
    def passed(self) -> bool:
        return self.cross_block_identical and self.non_anticipating


def audit_adaptedness(scenario: mg.GameScenario, player: int, build, bundle=None,
                      alt_seed: int | None = None, zero_sum: bool = False) -> AuditReport:
    """Check that ``build(state)`` only uses player ``player``'s past observations.

    1. Redraw every noise stream outside the player's block: values must be
       bit-identical.
    2. Redraw all increments from a cut step on: values up to the cut must be
       bit-identical.
    """
    from .stochastic_core import sample_brownian_bundle

    if bundle is None:
        bundle = sample_brownian_bundle(scenario.grid, scenario.dims, scenario.n_paths, scenario.seed)
    alt_seed = scenario.seed + 1_000_003 if alt_seed is None else alt_seed
    ref = np.asarray(build(mg.simulate_game(scenario, bundle, zero_sum)), dtype=float)
    others = [k for k in range(3) if k != player]
    moved = np.asarray(build(mg.simulate_game(scenario, resample_blocks(bundle, others, alt_seed), zero_sum)))
    cross = bool(np.array_equal(ref, moved))
    change = float(np.max(np.abs(ref - moved)))
    n = scenario.grid.n_steps
    cuts = (n // 4, n // 2, (3 * n) // 4)
    causal = True
    for j in cuts:
        b = bundle
        for k in range(3):
            if scenario.dims[k]:
                b = resample_after(b, k, j, alt_seed + k)
        later = np.asarray(build(mg.simulate_game(scenario, b, zero_sum)))
        if not np.array_equal(ref[:, : j + 1], later[:, : j + 1]):
            causal = False
            change = max(change, float(np.max(np.abs(ref[:, : j + 1] - later[:, : j + 1]))))
    return AuditReport(player, cross, causal, change, cuts)


def audited(strategy: mg.StrategyProcess, report: AuditReport) -> mg.StrategyProcess:
    """Stamp the audit verdict on a strategy; a failed one is refused downstream."""
    strategy.adapted = report.passed
    return strategy
