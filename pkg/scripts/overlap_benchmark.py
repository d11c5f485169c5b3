"""Wall time of single- vs multiple-issue SUMMA under injected latency.

Sweeps the per-message delay and the issue depth on a dense uniform
multiply and prints one CSV row per configuration with the median of the
repeats.

    python3 scripts/overlap_benchmark.py --n 128 --tile 8 --delays 0 0.5 1 2
"""

import argparse
import csv
import statistics
import sys

from clrsumma import gen
from clrsumma.runtime import spawn_grid
from clrsumma.summa import run_multiply, trace_overlap
from clrsumma.tiling import Tiling, from_dense


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--grid", type=int, nargs=2, default=(2, 2))
    p.add_argument("--delays", type=float, nargs="+", default=[0.0, 1.0], help="milliseconds")
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--repeat", type=int, default=15)
    args = p.parse_args()

    t = Tiling.uniform(args.n, args.tile)
    a, b = gen.random_dense(args.n, 1), gen.random_dense(args.n, 2)
    out = csv.writer(sys.stdout)
    out.writerow(["delay_ms", "issue_depth", "median_wall_s", "overlap_fraction", "speedup_vs_single"])
    for delay in args.delays:
        with spawn_grid(*args.grid, net_delay=delay / 1000, trace=True) as grid:
            ta, tb = from_dense(a, t, t, None, 0.0, grid), from_dense(b, t, t, None, 0.0, grid)
            base = None
            for depth in args.depths:
                mode = "single_issue" if depth == 1 else "multiple_issue"
                walls = []
                for _ in range(args.repeat):
                    grid.trace.clear()
                    rep = run_multiply(ta, tb, 0.0, issue_depth=depth, mode=mode)
                    walls.append(rep.wall_time)
                med = statistics.median(walls)
                base = med if base is None else base
                out.writerow([delay, depth, f"{med:.4f}", f"{trace_overlap(rep.trace):.3f}", f"{base / med:.3f}"])
                sys.stdout.flush()


if __name__ == "__main__":
    main()
