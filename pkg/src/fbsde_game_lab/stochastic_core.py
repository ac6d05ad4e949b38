"""Time grids, seeded Brownian bundles and left-point stochastic sums.

Random numbers come from counter-based Philox streams keyed by
``(seed, stream, path block)``, so a path's increments do not depend on how
many paths are drawn, in which order blocks are generated, or on the thread
count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

PATH_BLOCK = 256
N_BLOCKS = 3

# stream codes: one independent stream per (noise kind, block)
_KINDS = {"W": 0, "Wbar": 1, "init": 2}


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Nearest node index for time ``t``."""
        if not 0.0 <= t <= self.T * (1 + 1e-12):
            raise InvalidArgument(f"time {t} outside [0, {self.T}]")
        return int(round(t / self.dt))


def make_time_grid(T: float, n_steps: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon T must be positive, got {T}")
    if int(n_steps) != n_steps or n_steps < 2:
        raise InvalidArgument(f"n_steps must be an integer >= 2, got {n_steps}")
    return TimeGrid(float(T), int(n_steps))


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments for the three noise blocks of the game.

    ``dW[k]`` drives the observation / stock noise of block k, ``dWbar[k]`` the
    drift (OU) noise and ``init[k]`` holds standard normals used to draw the
    drift's initial value from its prior.  Arrays are
    ``(n_paths, n_steps, n_k)`` and ``(n_paths, n_k)`` respectively.
    """

    grid: TimeGrid
    dims: tuple[int, int, int]
    n_paths: int
    seed: int
    dW: tuple[np.ndarray, ...]
    dWbar: tuple[np.ndarray, ...]
    init: tuple[np.ndarray, ...]
    stream_seeds: dict = field(default_factory=dict)


def _thread_cap() -> int:
    raw = os.environ.get("FBSDE_LAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def _stream_normals(seed: int, code: int, n_paths: int, shape: tuple[int, ...]) -> np.ndarray:
    n_blocks = -(-n_paths // PATH_BLOCK)

    def draw(b: int) -> np.ndarray:
        ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(code, b))
        gen = np.random.Generator(np.random.Philox(ss))
        return gen.standard_normal((PATH_BLOCK, *shape))

    workers = min(_thread_cap(), n_blocks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(draw, range(n_blocks)))
    else:
        chunks = [draw(b) for b in range(n_blocks)]
    return np.concatenate(chunks, axis=0)[:n_paths]


def stream_code(kind: str, block: int) -> int:
    return 16 * _KINDS[kind] + block


def sample_brownian_bundle(
    grid: TimeGrid,
    dims: tuple[int, int, int],
    n_paths: int,
    seed: int,
    stream_seeds: dict | None = None,
) -> PathBundle:
    """Draw all increments of the game.

    ``stream_seeds`` optionally maps ``(kind, block)`` to a seed replacing
    ``seed`` for that stream only; this is how noise of selected blocks is
    resampled while everything else stays bit-identical.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != N_BLOCKS or any(d < 0 for d in dims):
        raise InvalidArgument(f"dims must be three nonnegative ints, got {dims}")
    if sum(dims) == 0:
        raise InvalidArgument("total noise dimension is zero")
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidArgument(f"n_paths must be >= 1, got {n_paths}")
    stream_seeds = dict(stream_seeds or {})
    sqdt = np.sqrt(grid.dt)
    out = {kind: [] for kind in _KINDS}
    used = {}
    for kind in _KINDS:
        for k, n_k in enumerate(dims):
            s = stream_seeds.get((kind, k), seed)
            used[(kind, k)] = s
            if n_k == 0:
                shape = (n_paths, grid.n_steps, 0) if kind != "init" else (n_paths, 0)
                out[kind].append(np.zeros(shape))
                continue
            if kind == "init":
                z = _stream_normals(s, stream_code(kind, k), n_paths, (n_k,))
            else:
                z = _stream_normals(s, stream_code(kind, k), n_paths, (grid.n_steps, n_k)) * sqdt
            out[kind].append(z)
    return PathBundle(
        grid=grid,
        dims=dims,
        n_paths=int(n_paths),
        seed=int(seed),
        dW=tuple(out["W"]),
        dWbar=tuple(out["Wbar"]),
        init=tuple(out["init"]),
        stream_seeds=used,
    )


def resample_blocks(bundle: PathBundle, blocks, seed: int) -> PathBundle:
    """Same bundle with every stream of ``blocks`` redrawn from ``seed``."""
    seeds = dict(bundle.stream_seeds)
    for kind in _KINDS:
        for k in blocks:
            seeds[(kind, k)] = seed
    return sample_brownian_bundle(bundle.grid, bundle.dims, bundle.n_paths, bundle.seed, seeds)


def resample_after(bundle: PathBundle, block: int, step: int, seed: int) -> PathBundle:
    """Replace block ``block``'s increments from ``step`` on with fresh noise.

    Values of any adapted functional at nodes ``<= step`` must not change.
    """
    fresh = resample_blocks(bundle, [block], seed)
    dW = list(bundle.dW)
    dWbar = list(bundle.dWbar)
    dW[block] = np.concatenate([bundle.dW[block][:, :step], fresh.dW[block][:, step:]], axis=1)
    dWbar[block] = np.concatenate(
        [bundle.dWbar[block][:, :step], fresh.dWbar[block][:, step:]], axis=1
    )
    return PathBundle(
        bundle.grid, bundle.dims, bundle.n_paths, bundle.seed,
        tuple(dW), tuple(dWbar), bundle.init, dict(bundle.stream_seeds),
    )


def as_increments(x: np.ndarray) -> np.ndarray:
    """View increments as ``(n_paths, n_steps, dim)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :, None]
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim == 3:
        return x
    raise InvalidArgument(f"increments must be 1-3 dimensional, got shape {x.shape}")


def _left_points(integrand, dW: np.ndarray) -> np.ndarray:
    """Integrand values at the left end of each step, broadcast to dW."""
    n_paths, n_steps, dim = dW.shape
    f = np.asarray(integrand, dtype=float)
    if f.ndim == 0:
        return np.broadcast_to(f, dW.shape)
    if f.ndim == 1:
        f = f[None, :, None]
    elif f.ndim == 2:
        f = f[:, :, None]
    if f.ndim != 3:
        raise InvalidArgument(f"integrand has unsupported shape {f.shape}")
    if f.shape[1] == n_steps + 1:
        f = f[:, :n_steps]
    elif f.shape[1] == 1:
        f = np.broadcast_to(f, (f.shape[0], n_steps, f.shape[2]))
    if f.shape[1] != n_steps:
        raise InvalidArgument(
            f"integrand has {f.shape[1]} time nodes, increments have {n_steps} steps"
        )
    try:
        return np.broadcast_to(f, dW.shape)
    except ValueError:
        raise InvalidArgument(f"integrand shape {f.shape} does not conform to {dW.shape}") from None


def _prepend_zero(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[1] = (1, 0)
    return np.pad(x, pad)


def ito_integral(integrand, dW) -> np.ndarray:
    """Componentwise left-point sums ``sum_{j<k} f(t_j) dW_j``.

    Returns ``(n_paths, n_steps + 1, dim)`` with node 0 equal to zero.
    """
    dW = as_increments(dW)
    f = _left_points(integrand, dW)
    return _prepend_zero(np.cumsum(f * dW, axis=1))


def _log_exponential(b, dW, dt: float, sign: float) -> np.ndarray:
    dW = as_increments(dW)
    f = _left_points(b, dW)
    steps = sign * np.sum(f * dW, axis=2) - 0.5 * np.sum(f * f, axis=2) * dt
    return _prepend_zero(np.cumsum(steps, axis=1))


def stochastic_exponential(b, dW, dt: float, sign: int = 1) -> np.ndarray:
    """``exp{sign * int b.dW - 1/2 int |b|^2 dt}`` on grid nodes, shape ``(n_paths, n_steps+1)``."""
    if sign not in (1, -1):
        raise InvalidArgument("sign must be +1 or -1")
    return np.exp(_log_exponential(b, dW, dt, sign))


def girsanov_weight(h, dY, grid: TimeGrid) -> np.ndarray:
    """Density process ``Z = exp{sum_j int h_j dY_j - 1/2 sum_j int h_j^2 ds}``."""
    dY = as_increments(dY)
    if dY.shape[1] != grid.n_steps:
        raise InvalidArgument(f"observation increments have {dY.shape[1]} steps, grid has {grid.n_steps}")
    return np.exp(_log_exponential(h, dY, grid.dt, 1))


def rate_nodes(r, grid: TimeGrid) -> np.ndarray:
    """Short rate evaluated on the grid nodes: constant, callable of t, or array."""
    if callable(r):
        vals = np.asarray([r(t) for t in grid.times], dtype=float)
    else:
        vals = np.asarray(r, dtype=float)
        if vals.ndim == 0:
            vals = np.full(grid.n_steps + 1, float(vals))
    if vals.shape != (grid.n_steps + 1,):
        raise InvalidArgument(f"rate must give {grid.n_steps + 1} node values, got shape {vals.shape}")
    return vals


def integrated_rate(r, grid: TimeGrid) -> np.ndarray:
    """Left-point ``int_0^t r ds`` at every node."""
    vals = rate_nodes(r, grid)
    return np.concatenate([[0.0], np.cumsum(vals[:-1] * grid.dt)])
