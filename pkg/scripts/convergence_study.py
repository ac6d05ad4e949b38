"""Discretisation and sampling convergence on the bundled scenarios.

Prints two tables: the Riccati error against the separable closed form as the
grid is refined, and the deflator vs regression wealth gap as paths grow.
"""

import argparse
from dataclasses import replace

import numpy as np

from fbsde_game_lab import market_game as mg
from fbsde_game_lab import ou_filter as of
from fbsde_game_lab.scenario import load_scenario
from fbsde_game_lab.stochastic_core import make_time_grid


def riccati_table(steps):
    print("n_steps  max|P - 1/(1+t)|   observed order")
    prev = None
    for n in steps:
        g = make_time_grid(1.0, n)
        P = of.solve_riccati(of.ou_params(1, 0.0, 0.0, 0.0, P0=1.0), 1.0, g)[:, 0, 0]
        err = float(np.max(np.abs(P - 1 / (1 + g.times))))
        order = "" if prev is None or err == 0 else f"{np.log2(prev / err):.2f}"
        print(f"{n:7d}  {err:17.3e}   {order}")
        prev = err


def wealth_table(scenario, paths, seed):
    sc = load_scenario(scenario)
    print(f"\nn_paths   y0 deflator    y0 regression   gap/combined se   ({scenario})")
    for n in paths:
        state = mg.simulate_game(replace(sc, n_paths=n, seed=seed))
        w = mg.state_wealth_y0(state)
        res = mg.lsmc_bsde_solve(state)
        z = abs(res.y0 - w.y0) / max(np.hypot(w.stderr, res.stderr), 1e-300)
        print(f"{n:7d}   {w.y0:12.6f}   {res.y0:13.6f}   {z:15.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="default")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--paths", type=int, nargs="+", default=[2000, 8000, 32000])
    args = ap.parse_args()
    riccati_table([4, 8, 16, 32, 64])
    wealth_table(args.scenario, args.paths, args.seed)


if __name__ == "__main__":
    main()
