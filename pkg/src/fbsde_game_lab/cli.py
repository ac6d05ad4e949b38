"""Command line entry point: one scenario file drives every experiment.

Exit codes: 0 when every check passes, 1 when a statistical or numerical
check fails, 2 on invalid input.  Every run writes CSV tables and a JSON
manifest into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import equilibrium as eq
from . import market_game as mg
from . import ou_filter as of
from .errors import ContractViolation, InvalidArgument, NumericalFailure
from .scenario import load_scenario, scenario_to_sections

EXIT_PASS, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    if isinstance(x, (bool, np.bool_)):
        return "PASS" if x else "FAIL"
    return x


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _filtered_players(sc):
    return [i for i in mg.PLAYERS if sc.dims[i] > 0]


# ------------------------------------------------------------------ commands


def cmd_riccati(sc, out: Path, args) -> tuple[dict, list]:
    header, cols = ["t"], [sc.grid.times]
    psd = True
    for i in _filtered_players(sc):
        P = of.solve_riccati(sc.drift[i], sc.sigma[i], sc.grid)
        n = sc.dims[i]
        for a in range(n):
            for b in range(n):
                header.append(f"P{i}_{a + 1}{b + 1}")
                cols.append(P[:, a, b])
        mineig = np.linalg.eigvalsh(P)[:, 0]
        header.append(f"mineig{i}")
        cols.append(mineig)
        psd &= bool(np.all(mineig >= -1e-8))
    path = write_csv(out / "riccati.csv", header, zip(*cols))
    return {"riccati_psd": psd}, [path]


def cmd_filter_check(sc, out: Path, args) -> tuple[dict, list]:
    state = mg.simulate_game(sc)
    idx = eq.probe_indices(sc.grid)
    header, cols = ["t"], [sc.grid.times[idx]]
    verdicts, innovations = {}, {}
    for i in _filtered_players(sc):
        rep = of.error_covariance_check(state.mu[i], state.filters[i].mu_hat, state.P[i], sc.grid, idx)
        n = sc.dims[i]
        for a in range(n):
            for b in range(n):
                tag = f"{i}_{a + 1}{b + 1}"
                header += [f"err_cov{tag}", f"P{tag}", f"stderr{tag}", f"z{tag}"]
                cols += [rep.empirical[:, a, b], rep.riccati[:, a, b], rep.stderr[:, a, b], rep.z[:, a, b]]
        verdicts[f"filter_consistency_player{i}"] = rep.passed
        innovations[i] = of.innovation_check(state.filters[i].innovation, sc.grid)
    path = write_csv(out / "filter_check.csv", header, zip(*cols))
    return verdicts, [path], {"innovation": innovations}


def _strategies(state, scale1: float):
    c1, c2 = state.candidates[1], state.candidates[2]
    if scale1 != 1.0:
        c1 = mg.StrategyProcess(1, "scaled-candidate", scale1 * c1.values, adapted=True)
    return c1, c2


def _summary_rows(state, strategies):
    rows = []
    for j, t in enumerate(state.grid.times):
        row = [t]
        for s in strategies:
            v = s.values[:, j]
            row += [v.mean(), np.quantile(v, 0.05), np.quantile(v, 0.95)]
        rows.append(row)
    return rows


def cmd_equilibrium(sc, out: Path, args) -> tuple[dict, list]:
    if args.zero_sum:
        return _saddle(sc, out)
    state = mg.simulate_game(sc)
    fresh = mg.simulate_game(sc.with_paths(seed=sc.seed + 1))
    strategies = _strategies(state, args.scale_candidate)
    files = [write_csv(out / "strategies.csv",
                       ["t", "I1_mean", "I1_q05", "I1_q95", "I2_mean", "I2_q05", "I2_q95"],
                       _summary_rows(state, strategies))]
    costs = mg.equilibrium_costs(state, strategies)
    files.append(write_csv(out / "costs.csv", ["player", "J", "stderr", "running", "y0_part"],
                           [[i, c.mean, c.stderr, c.running, c.y0_part] for i, c in costs.items()]))
    verdicts = {}
    mp_rows = []
    for i in mg.PLAYERS:
        rep = eq.mp_residual(state, strategies, player=i)
        I = strategies[i - 1].values
        gap = I - state.candidates[i].values
        c = sc.cost
        for m, t in enumerate(rep.probe_times):
            j = sc.grid.index_of(t)
            signed = mg.hamiltonian_example_grad(state.p_hat[i][:, j], I[:, j], c.L(i), c.beta, t)
            linear = 2 * c.L(i) * np.exp(-c.beta * t) * gap[:, j]
            mp_rows.append([i, t, rep.closed_form[m], signed.mean(), linear.mean(),
                            rep.regression[m], rep.regression_stderr[m], rep.discretization_bound[m]])
        verdicts[f"mp_closed_form_player{i}"] = rep.closed_form_ok
        verdicts[f"mp_regression_player{i}"] = rep.regression_ok
    files.append(write_csv(out / "mp_residual.csv",
                           ["player", "t", "closed_form_max", "closed_form_mean", "linear_prediction_mean",
                            "regression_rms", "regression_stderr", "discretization_bound"], mp_rows))
    dev_rows, fit_rows = [], []
    for i in mg.PLAYERS:
        for name, v in eq.default_deviations().items():
            rep = eq.certify_deviation(state, fresh, i, v, name, strategies)
            for e, d, s in zip(rep.eps, rep.delta_J, rep.stderr):
                dev_rows.append([i, name, e, d, s])
            fit_rows.append([i, name, *rep.coef, *rep.coef_stderr, rep.eps_star, rep.spacing,
                             rep.expected_quadratic, rep.expected_quadratic_stderr, rep.law_z,
                             rep.clipped, rep.passed])
            verdicts[f"deviation_player{i}_{name}"] = rep.passed
    files.append(write_csv(out / "deviations.csv", ["player", "family", "eps", "delta_J", "stderr"], dev_rows))
    files.append(write_csv(out / "deviation_fits.csv",
                           ["player", "family", "a0", "a1", "a2", "a0_se", "a1_se", "a2_se", "eps_star",
                            "spacing", "expected_a2", "expected_a2_se", "law_z", "clipped", "verdict"],
                           fit_rows))
    return verdicts, files


def _saddle(sc, out: Path):
    state = mg.simulate_game(sc, zero_sum=True)
    rows, verdicts = [], {}
    for name, v in eq.default_deviations().items():
        rep = eq.saddle_check(state, deviation1=v, deviation2=v)
        for side in (rep.minimiser, rep.maximiser):
            for e, d, s in zip(side.eps, side.delta_J, side.stderr):
                rows.append([name, side.player, e, d, s, side.sign_ok])
        verdicts[f"saddle_{name}"] = rep.passed
    path = write_csv(out / "saddle.csv", ["family", "player", "eps", "delta_J", "stderr", "verdict"], rows)
    return verdicts, [path]


def cmd_bsde_xcheck(sc, out: Path, args) -> tuple[dict, list]:
    state = mg.simulate_game(sc)
    w = mg.state_wealth_y0(state)
    lsmc = mg.lsmc_bsde_solve(state, basis=args.basis)
    gap = lsmc.y0 - w.y0
    combined = float(np.hypot(w.stderr, lsmc.stderr))
    ok = abs(gap) <= max(3.0 * combined, 1e-8)
    path = write_csv(out / "bsde_xcheck.csv",
                     ["y0_deflator", "stderr_deflator", "y0_lsmc", "stderr_lsmc", "gap",
                      "combined_stderr", "max_condition", "basis", "verdict"],
                     [[w.y0, w.stderr, lsmc.y0, lsmc.stderr, gap, combined, lsmc.max_condition, args.basis, ok]])
    return {"bsde_xcheck": ok}, [path]


COMMANDS = {
    "riccati": cmd_riccati,
    "filter-check": cmd_filter_check,
    "equilibrium": cmd_equilibrium,
    "bsde-xcheck": cmd_bsde_xcheck,
}


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbsde-game-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--scenario", required=True,
                    help="INI scenario file, run manifest (.json) or bundled name")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, help="override the scenario seed")
    ap.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    ap.add_argument("--zero-sum", action="store_true", help="equilibrium: run the saddle-point check")
    ap.add_argument("--scale-candidate", type=float, default=1.0,
                    help="equilibrium: multiply player 1's candidate (fixture for a failing check)")
    ap.add_argument("--basis", choices=("quadratic", "linear", "constant"), default="quadratic",
                    help="bsde-xcheck: LSMC regression basis")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        sc = load_scenario(args.scenario)
        if args.paths is not None and args.paths < 1:
            raise InvalidArgument("--paths must be positive")
        sc = sc.with_paths(args.paths, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (InvalidArgument, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    extra = {}
    try:
        result = COMMANDS[args.command](sc, out, args)
        verdicts, files = result[0], result[1]
        if len(result) > 2:
            extra = result[2]
        code = EXIT_PASS if all(verdicts.values()) else EXIT_FAIL
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFailure, ContractViolation) as exc:
        print(f"check failed: {exc} {getattr(exc, 'report', '')}", file=sys.stderr)
        verdicts, files, code = {"numerical": False}, [], EXIT_FAIL
        extra = {"failure": str(exc), "report": {k: str(v) for k, v in getattr(exc, "report", {}).items()}}
    manifest = {
        "command": args.command,
        "tool": "fbsde-game-lab",
        "version": __version__,
        "seed": sc.seed,
        "n_paths": sc.n_paths,
        "flags": {"zero_sum": args.zero_sum, "scale_candidate": args.scale_candidate, "basis": args.basis},
        "scenario": scenario_to_sections(sc),
        "started_utc": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": time.perf_counter() - started,
        "verdicts": {k: bool(v) for k, v in verdicts.items()},
        "outputs": [p.name for p in files],
        **extra,
    }
    (out / f"manifest_{args.command}.json").write_text(json.dumps(manifest, indent=2))
    for name, ok in verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return code


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
