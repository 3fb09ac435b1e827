"""Convergence orders of the spike variations on a Gaussian ensemble.

Prints the norm table and fitted slopes of Y, Z and the expansion remainder
against the spike width.

    python3 scripts/order_study.py --paths 20000 --Nt 512 --M 63
"""

import argparse
import time

from spde_smp.coefficients import load_preset
from spde_smp.field import Grid1D
from spde_smp.forward import TimeGrid, sample_noise
from spde_smp.variation import order_slopes


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--preset", default="tanh-drift")
    ap.add_argument("--M", type=int, default=63)
    ap.add_argument("--Nt", type=int, default=512)
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--ubar", type=float, default=0.0)
    ap.add_argument("--t-bar", type=float, default=0.5)
    ap.add_argument("--v", type=float, default=1.0)
    ap.add_argument("--p", type=float, default=4.0)
    ap.add_argument("--kmin", type=int, default=4, help="largest spike is 2^-kmin T")
    ap.add_argument("--kmax", type=int, default=8, help="smallest spike is 2^-kmax T")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    problem = load_preset(args.preset)
    tg = TimeGrid(problem.T, args.Nt)
    eps = [2.0**-k * problem.T for k in range(args.kmin, args.kmax + 1)]
    start = time.perf_counter()
    noise = sample_noise(tg, problem.m, "mc", paths=args.paths, seed=args.seed)
    res = order_slopes(problem, Grid1D(args.M), noise, args.ubar, args.t_bar * problem.T, args.v, eps,
                       p=args.p, threads=args.threads)
    elapsed = time.perf_counter() - start

    print(f"{'eps':>10} {'|Y|':>12} {'|Z|':>12} {'|R|':>12} {'se(R)':>10}")
    for r in res.table:
        print(f"{r.eps:10.3e} {r.norm_Y:12.5e} {r.norm_Z:12.5e} {r.norm_remainder:12.5e} {r.stderr_remainder:10.2e}")
    print(f"slope_Y = {res.slope_Y:.4f}   slope_Z = {res.slope_Z:.4f}   slope_R = {res.slope_remainder:.4f}")
    print(f"elapsed {elapsed:.1f} s")


if __name__ == "__main__":
    main()
