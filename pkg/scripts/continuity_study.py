"""Weak time-continuity of the second adjoint across tree depths.

For each depth prints E|<(P_{t+k dt} - P_t) f, g>| for k dt from about 0.2 T
down to dt, and the ratio of the last entry to the first.  The ratio shows
how far the tree instances are from resolving the limit eps -> 0.

    python3 scripts/continuity_study.py --depths 8 12 16
"""

import argparse
import math

from spde_smp.adjoint import TREE_EXACT, hbar_fields, p_continuity, solve_bsde
from spde_smp.coefficients import load_preset
from spde_smp.field import Grid1D
from spde_smp.forward import TimeGrid, sample_noise, solve_state


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--preset", default="sigma-switch")
    ap.add_argument("--M", type=int, default=15)
    ap.add_argument("--ubar", type=float, default=1.0)
    ap.add_argument("--depths", type=int, nargs="+", default=[8, 12, 16])
    args = ap.parse_args()

    problem = load_preset(args.preset)
    grid = Grid1D(args.M)
    f, g = grid.mode(1), (grid.mode(1) + grid.mode(2)) / math.sqrt(2.0)
    for Nt in args.depths:
        noise = sample_noise(TimeGrid(problem.T, Nt), problem.m, "tree")
        state = solve_state(problem, grid, args.ubar, noise)
        adj = solve_bsde(state, TREE_EXACT)
        k0 = max(1, round(0.2 * Nt))
        lags = list(range(k0, 0, -1))
        vals = p_continuity(state, adj, Nt // 4, lags, f, g, hbar=hbar_fields(state, adj))
        seq = ", ".join(f"{v:.3e}" for v in vals)
        print(f"Nt={Nt:3d}  lags {k0}..1: {seq}  ratio {vals[-1] / vals[0]:.3f}")


if __name__ == "__main__":
    main()
