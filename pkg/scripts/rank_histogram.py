"""Rank distribution of the Newton-Schulz intermediates X, Y, Z, T.

Runs the inverse square root of the overlap surrogate with CLR tiles and
prints, for the chosen iteration, how many tiles have each stored rank.
Output is CSV (matrix, rank, count) on stdout.

    python3 scripts/rank_histogram.py --iteration 5 --eps-lr 1e-6
"""

import argparse
import csv
import sys

from clrsumma import gen, solver
from clrsumma.runtime import spawn_grid
from clrsumma.tiling import Tiling, from_dense


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iteration", type=int, default=5, help="counting from 1")
    p.add_argument("--eps-lr", type=float, default=1e-6)
    p.add_argument("--eps-sp", type=float, default=1e-13)
    p.add_argument("--kind", choices=("overlap", "coulomb"), default="overlap")
    p.add_argument("--grid", type=int, nargs=2, default=(2, 2))
    args = p.parse_args()

    geo = gen.default_geometry(args.kind)
    m = gen.overlap_matrix(geo) if args.kind == "overlap" else gen.coulomb_matrix(geo)
    t = Tiling(tuple(geo.tile_boundaries()))
    with spawn_grid(*args.grid) as grid:
        tm = from_dense(m, t, t, args.eps_lr, args.eps_sp, grid)
        res = solver.inv_sqrt(
            tm, args.eps_lr, args.eps_sp, tol=0.0, max_iter=args.iteration, snapshot_iter=args.iteration - 1
        )
    out = csv.writer(sys.stdout)
    out.writerow(["matrix", "rank", "count"])
    for name in ("X", "Y", "Z", "T"):
        for rank, count in solver.rank_histogram(res.snapshots[name]).items():
            out.writerow([name, rank, count])


if __name__ == "__main__":
    main()
