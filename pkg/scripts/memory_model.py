"""Measured per-rank peak memory against the dense and sparse models.

For a dense and a block-diagonal operand pair, runs the multiply at several
issue depths and prints the ledger peak next to both predictions (in
matrix elements).

    python3 scripts/memory_model.py --n 128 --tile 16
"""

import argparse
import csv
import sys

import numpy as np

from clrsumma import gen
from clrsumma.runtime import predict_peak_dense, predict_peak_sparse, spawn_grid
from clrsumma.summa import run_multiply
from clrsumma.tiling import Tiling, from_dense, panel_occupancy


def block_diagonal(n, tile, seed):
    a = np.zeros((n, n))
    rng = np.random.default_rng(seed)
    for i in range(0, n, tile):
        a[i : i + tile, i : i + tile] = rng.standard_normal((tile, tile))
    return a


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--grid", type=int, nargs=2, default=(2, 2))
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 4])
    args = p.parse_args()
    n, k = args.n, args.tile
    pr, pc = args.grid

    t = Tiling.uniform(n, k)
    out = csv.writer(sys.stdout)
    out.writerow(["operands", "issue_depth", "measured_max", "predicted_dense", "predicted_sparse"])
    with spawn_grid(pr, pc) as grid:
        for label, a in (("dense", gen.random_dense(n, 1)), ("block_diagonal", block_diagonal(n, k, 1))):
            ta = from_dense(a, t, t, None, 0.0, grid)
            for depth in args.depths:
                rep = run_multiply(ta, ta, 0.0, issue_depth=depth)
                d = rep.plan.issue_depth
                za, zc = ta.zero_fraction(), rep.result.zero_fraction()
                avg_pr, avg_pc = panel_occupancy(ta, ta)
                dense = predict_peak_dense(n, n, n, k, k, k, pr, pc, d)
                sparse = predict_peak_sparse(n, n, n, k, k, k, pr, pc, d, za, za, zc, avg_pr, avg_pc)
                out.writerow([label, d, f"{max(rep.peak_elements):.0f}", f"{dense:.0f}", f"{sparse:.0f}"])


if __name__ == "__main__":
    main()
