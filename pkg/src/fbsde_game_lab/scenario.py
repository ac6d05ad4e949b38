"""Scenario files: INI text with one section per parameter group.

    [grid]      T, n_steps
    [dims]      n0, n1, n2
    [market]    r, sigma0, sigma1, sigma2
    [drift.k]   theta, delta, zeta, m0, P0          (k = 0, 1, 2)
    [cost]      L1, L2, M1, M2, beta
    [terminal]  kind = constant | function, value, blocks
    [mc]        n_paths, seed

Vectors and matrices are comma separated, matrices row-major (``;`` may be
used between rows).  A single number stands for a constant vector or a
multiple of the identity.  Omitted drift fields default to theta = 1,
delta = 0, zeta = 0, m0 = 1, P0 = I; omitted sigma defaults to I.
"""

from __future__ import annotations

import configparser
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .market_game import CostParams, GameScenario, TerminalClaim
from .ou_filter import ou_params
from .stochastic_core import make_time_grid

BUNDLED = ("default", "deterministic", "exact_prior", "scalar_steady", "biased_lsmc")

DRIFT_DEFAULTS = {"theta": "1", "delta": "0", "zeta": "0", "m0": "1", "P0": None}


def _numbers(text: str, where: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.replace(";", ",").split(",") if x.strip()])
    except ValueError:
        raise InvalidArgument(f"[{where}] could not parse numbers from {text!r}") from None


def _vector(text, n, where):
    v = _numbers(text, where)
    if v.size == 1:
        return np.full(n, v[0])
    if v.size != n:
        raise InvalidArgument(f"[{where}] expected {n} entries, got {v.size}")
    return v


def _matrix(text, n, where):
    v = _numbers(text, where)
    if v.size == 1:
        return v[0] * np.eye(n)
    if v.size != n * n:
        raise InvalidArgument(f"[{where}] expected a {n}x{n} matrix ({n * n} entries), got {v.size}")
    return v.reshape(n, n)


def _get(sections, name, key, default=None, required=False):
    sec = sections.get(name, {})
    if key in sec:
        return str(sec[key])
    if required:
        raise InvalidArgument(f"[{name}] missing required field {key!r}")
    return default


def scenario_from_sections(sections: dict) -> GameScenario:
    """Build a scenario from ``{section: {key: text}}``."""
    sections = {k: {kk: v for kk, v in dict(sec).items()} for k, sec in sections.items()}
    try:
        T = float(_get(sections, "grid", "T", required=True))
        n_steps = int(_get(sections, "grid", "n_steps", required=True))
        grid = make_time_grid(T, n_steps)
    except ValueError as exc:
        raise InvalidArgument(f"[grid] {exc}") from None
    try:
        dims = tuple(int(_get(sections, "dims", f"n{k}", "0")) for k in range(3))
    except ValueError as exc:
        raise InvalidArgument(f"[dims] {exc}") from None
    if any(d < 0 for d in dims) or sum(dims) == 0:
        raise InvalidArgument(f"[dims] need nonnegative dims with a positive total, got {dims}")
    r = float(_get(sections, "market", "r", "0"))
    sigma, drift = [], []
    for k, n in enumerate(dims):
        sig_text = _get(sections, "market", f"sigma{k}", "1")
        sig = _matrix(sig_text, n, "market")
        if n and np.linalg.cond(sig) > 1e12:
            raise InvalidArgument(f"[market] sigma{k} is singular")
        sigma.append(sig)
        where = f"drift.{k}"
        fields = {}
        for key, default in DRIFT_DEFAULTS.items():
            fields[key] = _get(sections, where, key, default)
        P0_text = fields["P0"]
        try:
            drift.append(ou_params(
                n,
                _vector(fields["theta"], n, where),
                _vector(fields["delta"], n, where),
                _matrix(fields["zeta"], n, where),
                _vector(fields["m0"], n, where),
                np.eye(n) if P0_text is None else _matrix(P0_text, n, where),
            ))
        except InvalidArgument as exc:
            raise InvalidArgument(f"[{where}] {exc}") from None
    try:
        cost = CostParams(
            float(_get(sections, "cost", "L1", "1")),
            float(_get(sections, "cost", "L2", "1")),
            float(_get(sections, "cost", "M1", "1")),
            float(_get(sections, "cost", "M2", "1")),
            float(_get(sections, "cost", "beta", "0")),
        )
    except (InvalidArgument, ValueError) as exc:
        raise InvalidArgument(f"[cost] {exc}") from None
    try:
        blocks = tuple(int(b) for b in _numbers(_get(sections, "terminal", "blocks", "1, 2"), "terminal"))
        terminal = TerminalClaim(
            _get(sections, "terminal", "kind", "constant").strip(),
            float(_get(sections, "terminal", "value", "1")),
            blocks,
        )
    except (InvalidArgument, ValueError) as exc:
        raise InvalidArgument(f"[terminal] {exc}") from None
    try:
        n_paths = int(_get(sections, "mc", "n_paths", "10000"))
        seed = int(_get(sections, "mc", "seed", "0"))
    except ValueError as exc:
        raise InvalidArgument(f"[mc] {exc}") from None
    if n_paths < 1:
        raise InvalidArgument("[mc] n_paths must be positive")
    return GameScenario(grid, dims, r, tuple(sigma), tuple(drift), cost, terminal, n_paths, seed)


def parse_scenario(text: str) -> GameScenario:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidArgument(f"malformed scenario file: {exc}") from None
    return scenario_from_sections({s: dict(cp[s]) for s in cp.sections()})


def load_scenario(source: str | Path) -> GameScenario:
    """Scenario from an INI file, a run manifest (``.json``) or a bundled name."""
    source = str(source)
    if source in BUNDLED:
        text = resources.files("fbsde_game_lab.scenarios").joinpath(f"{source}.ini").read_text()
        return parse_scenario(text)
    path = Path(source)
    if not path.exists():
        raise InvalidArgument(f"scenario file {source} not found")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return scenario_from_sections(data.get("scenario", data))
    return parse_scenario(path.read_text())


def _fmt(x) -> str:
    a = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    return ", ".join(repr(float(v)) for v in a)


def scenario_to_sections(sc: GameScenario) -> dict:
    """Fully resolved sections; feeding them back reproduces ``sc`` exactly."""
    out = {
        "grid": {"T": repr(sc.grid.T), "n_steps": str(sc.grid.n_steps)},
        "dims": {f"n{k}": str(n) for k, n in enumerate(sc.dims)},
        "market": {"r": repr(float(sc.r))},
        "cost": {
            "L1": repr(sc.cost.L1), "L2": repr(sc.cost.L2),
            "M1": repr(sc.cost.M1), "M2": repr(sc.cost.M2), "beta": repr(sc.cost.beta),
        },
        "terminal": {
            "kind": sc.terminal.kind, "value": repr(sc.terminal.value),
            "blocks": ", ".join(str(b) for b in sc.terminal.blocks),
        },
        "mc": {"n_paths": str(sc.n_paths), "seed": str(sc.seed)},
    }
    for k, n in enumerate(sc.dims):
        out["market"][f"sigma{k}"] = _fmt(sc.sigma[k]) if n else "1"
        d = sc.drift[k]
        out[f"drift.{k}"] = {
            "theta": _fmt(d.theta) if n else "1",
            "delta": _fmt(d.delta) if n else "0",
            "zeta": _fmt(d.zeta) if n else "0",
            "m0": _fmt(d.m0) if n else "1",
            "P0": _fmt(d.P0) if n else "1",
        }
    return out
