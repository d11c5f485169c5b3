"""Command-line harness: ``clrsumma {gen,multiply,invsqrt}``.

Every command prints a JSON report on stdout (and optionally writes it to
``--report``).  The report header records the flags, seeds, worker count
and library versions, so any run can be repeated from its own report.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import statistics
import sys
from pathlib import Path

import numpy as np
import scipy

from clrsumma import __version__, gen, solver, tiling
from clrsumma.clr import Kind
from clrsumma.kernel import DimensionError
from clrsumma.runtime import (
    ProcessGrid,
    default_issue_depth,
    env_worker_cap,
    predict_peak_dense,
    predict_peak_sparse,
)
from clrsumma.summa import run_multiply, trace_overlap
from clrsumma.tiling import FormatError, Tiling

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


# -- flag parsing helpers ---------------------------------------------------


def parse_grid(text: str) -> tuple[int, int]:
    try:
        pr, pc = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 2x2, got {text!r}") from None
    if pr < 1 or pc < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return pr, pc


def parse_eps(text: str) -> float | None:
    """A non-negative float, or ``none`` for uncompressed dense tiles."""
    if text.lower() in ("none", "dense"):
        return None
    v = float(text)
    if v < 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError("thresholds must be finite and >= 0")
    return v


def parse_issue_list(text: str) -> list[str]:
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if item != "opt":
            try:
                if int(item) < 1:
                    raise ValueError
            except ValueError:
                raise argparse.ArgumentTypeError(f"issue depth must be 'opt' or an integer >= 1, got {item!r}") from None
        out.append(item)
    return out


def resolve_issue(item: str, pr: int, pc: int) -> int:
    return default_issue_depth(pr, pc) if item == "opt" else int(item)


def header(args: argparse.Namespace, argv: list[str]) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    return {
        "command": args.command,
        "argv": argv,
        "flags": flags,
        "workers_cap": env_worker_cap(),
        "clr_workers_env": os.environ.get("CLR_WORKERS"),
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=False, default=_json_default)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    sys.stdout.write(text + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def make_grid(args, pr: int, pc: int, trace: bool = False) -> ProcessGrid:
    return ProcessGrid(
        pr,
        pc,
        args.workers_per_rank,
        seed=args.seed,
        net_delay=args.net_delay_ms / 1000.0,
        jitter=args.jitter_ms / 1000.0,
        trace=trace,
    )


def storage_summary(t: tiling.TiledMatrix) -> dict:
    counts = {k.name.lower(): 0 for k in Kind}
    for i in range(t.tile_grid[0]):
        for j in range(t.tile_grid[1]):
            counts[t.block(i, j).kind.name.lower()] += 1
    dense_bytes = 8 * t.dims[0] * t.dims[1]
    return {
        "dims": list(t.dims),
        "tile_grid": list(t.tile_grid),
        "storage_bytes": t.storage_bytes,
        "dense_bytes": dense_bytes,
        "compression_ratio": t.storage_bytes / dense_bytes if dense_bytes else 0.0,
        "tiles": counts,
    }


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    kind = args.kind
    tile_bounds = None
    if kind in ("overlap", "coulomb"):
        if args.n is not None:
            raise UsageError("--n applies to random/spd; cluster kinds take --clusters/--points")
        geom = gen.default_geometry(
            kind,
            n_clusters=args.clusters,
            points_per_cluster=args.points,
            cluster_spacing=args.spacing,
            intra_cluster_radius=args.radius,
            seed=args.seed,
        )
        if kind == "overlap":
            if args.ridge is not None:
                raise UsageError("--ridge applies to coulomb only")
            gamma = gen.OVERLAP_GAMMA if args.gamma is None else args.gamma
            m = gen.overlap_matrix(geom, gamma)
        else:
            if args.gamma is not None:
                raise UsageError("--gamma applies to overlap only")
            m = gen.coulomb_matrix(geom, 0.0 if args.ridge is None else args.ridge)
        if args.tile is None:
            tile_bounds = geom.tile_boundaries()
        extra = {"geometry": vars_of(geom)}
    else:
        if any(v is not None for v in (args.clusters, args.points, args.gamma, args.ridge, args.spacing, args.radius)):
            raise UsageError("cluster flags do not apply to random/spd")
        n = 256 if args.n is None else args.n
        m = gen.random_dense(n, args.seed) if kind == "random" else gen.random_spd(n, args.seed)
        extra = {}
    if tile_bounds is None:
        tile = 64 if args.tile is None else args.tile
        if tile < 1:
            raise UsageError("--tile must be >= 1")
        tile_bounds = Tiling.uniform(m.shape[0], tile).boundaries
    t = Tiling(tuple(tile_bounds))
    with ProcessGrid(1, 1, max_workers=1) as grid:
        tm = tiling.from_dense(m, t, t, args.eps_lr, args.eps_sp, grid)
        nbytes = tiling.save(tm, args.out)
        report = header(args, args.argv)
        report.update(kind=kind, out=args.out, file_bytes=nbytes, **extra, **storage_summary(tm))
    emit(report, args.report)
    return EXIT_OK


def vars_of(g: gen.ClusterGeometry) -> dict:
    return {
        "n_clusters": g.n_clusters,
        "points_per_cluster": g.points_per_cluster,
        "cluster_spacing": g.cluster_spacing,
        "intra_cluster_radius": g.intra_cluster_radius,
        "seed": g.seed,
    }


# -- multiply -----------------------------------------------------------------


def predicted_peaks(a, b, c, pr, pc, depth) -> dict:
    M, K = a.dims
    N = b.dims[1]
    k = int(max(a.col_tiling.sizes))
    m = int(max(a.row_tiling.sizes))
    n = int(max(b.col_tiling.sizes))
    out = {"dense": predict_peak_dense(M, N, K, m, n, k, pr, pc, depth)}
    za, zb, zc = a.zero_fraction(), b.zero_fraction(), c.zero_fraction()
    avg_pr, avg_pc = tiling.panel_occupancy(a, b)
    out["sparse"] = predict_peak_sparse(M, N, K, m, n, k, pr, pc, depth, za, zb, zc, avg_pr, avg_pc)
    out["zero_fractions"] = {"a": za, "b": zb, "c": zc}
    out["panel_occupancy"] = {"rows": avg_pr, "cols": avg_pc}
    return out


def cmd_multiply(args) -> int:
    pr, pc = args.grid
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    report = header(args, args.argv)
    runs = []
    trace_records = []
    with make_grid(args, pr, pc, trace=True) as grid:
        a = tiling.load(args.a, grid, args.eps_lr, args.eps_sp)
        b = tiling.load(args.b, grid, args.eps_lr, args.eps_sp)
        if a.col_tiling != b.row_tiling:
            raise DimensionError(f"incompatible operands: A is {a.dims}, B is {b.dims} (or inner tilings differ)")
        oracle = tiling.gather_dense(a) @ tiling.gather_dense(b)
        for item in args.issue:
            depth = resolve_issue(item, pr, pc)
            mode = "single_issue" if depth == 1 else "multiple_issue"
            walls, rep = [], None
            for _ in range(args.repeat):
                with grid._cv:
                    grid.trace.clear()
                rep = run_multiply(a, b, args.eps_sp, issue_depth=depth, mode=mode, eps_lr="auto")
                walls.append(rep.wall_time)
            c = rep.result
            diff = tiling.gather_dense(c) - oracle
            onorm = float(np.linalg.norm(oracle))
            peaks = predicted_peaks(a, b, c, pr, pc, rep.plan.issue_depth)
            for rec in rep.trace:
                trace_records.append(dict(rec, issue=item))
            runs.append(
                {
                    "issue": item,
                    "issue_depth": rep.plan.issue_depth,
                    "mode": mode,
                    "wall_times": walls,
                    "median_wall": statistics.median(walls),
                    "n_tasks": rep.n_tasks,
                    "n_fused": rep.n_fused,
                    "n_split": rep.n_split,
                    "measured_peak_elements": rep.peak_elements,
                    "predicted_peak_elements": peaks,
                    "overlap_fraction": trace_overlap(rep.trace),
                    "leaked": [list(map(str, k)) for k in rep.leaked],
                    "quiescent": rep.quiescent,
                    "max_abs_err": float(np.max(np.abs(diff))) if diff.size else 0.0,
                    "rel_fro_err": float(np.linalg.norm(diff)) / onorm if onorm else float(np.linalg.norm(diff)),
                    "result": storage_summary(c),
                }
            )
    base = runs[0]["median_wall"]
    report["runs"] = runs
    report["speedup_vs_first"] = {r["issue"]: (base / r["median_wall"] if r["median_wall"] else None) for r in runs}
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for rec in trace_records:
                fh.write(json.dumps(rec, default=_json_default) + "\n")
    ok = all(r["quiescent"] and not r["leaked"] for r in runs)
    if args.check_tol is not None:
        ok = ok and all(r["rel_fro_err"] <= args.check_tol for r in runs)
    report["ok"] = ok
    emit(report, args.report)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- invsqrt ------------------------------------------------------------------


def _hist_json(h: dict[int, int]) -> dict[str, int]:
    return {str(k): v for k, v in h.items()}


def cmd_invsqrt(args) -> int:
    pr, pc = args.grid
    if args.max_iter < 1:
        raise UsageError("--max-iter must be >= 1")
    if args.hist_iter < 1:
        raise UsageError("--hist-iter counts from 1")
    report = header(args, args.argv)
    with make_grid(args, pr, pc) as grid:
        m = tiling.load(args.m, grid, args.eps_lr, args.eps_sp)
        depth = resolve_issue(args.issue, pr, pc)
        mode = "single_issue" if depth == 1 else "multiple_issue"
        try:
            res = solver.inv_sqrt(
                m, args.eps_lr, args.eps_sp, args.tol, args.max_iter,
                issue_depth=depth, mode=mode, snapshot_iter=args.hist_iter - 1,
            )
        except solver.DivergenceError as exc:
            report.update(error="divergence", message=str(exc), history=exc.history)
            emit(report, args.report)
            return EXIT_RUNTIME
        except solver.NotSPDError as exc:
            report.update(error="not_spd", message=str(exc))
            emit(report, args.report)
            return EXIT_RUNTIME
        hist = {
            "iteration": args.hist_iter,
            "matrices": {k: _hist_json(solver.rank_histogram(v)) for k, v in res.snapshots.items()},
        }
        report.update(
            issue_depth=depth,
            alpha=res.alpha,
            iterations=res.iterations,
            converged=res.converged,
            history=res.history,
            iteration_times=res.times,
            histograms=[{k: _hist_json(h) for k, h in it.items()} for it in res.histograms],
            snapshot_histograms=hist,
            result=storage_summary(res.result),
        )
        if args.out:
            tiling.save(res.result, args.out)
    if args.hist:
        Path(args.hist).write_text(json.dumps(hist, indent=2) + "\n", encoding="utf-8")
    emit(report, args.report)
    return EXIT_OK if res.converged else EXIT_CHECK_FAILED


# -- argument parser -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clrsumma", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a test matrix and write it as a CLRM file")
    g.add_argument("--kind", choices=("overlap", "coulomb", "random", "spd"), required=True)
    g.add_argument("--clusters", type=int)
    g.add_argument("--points", type=int, help="points (basis functions) per cluster")
    g.add_argument("--spacing", type=float, help="cluster lattice spacing")
    g.add_argument("--radius", type=float, help="intra-cluster radius")
    g.add_argument("--gamma", type=float, help="overlap kernel exponent")
    g.add_argument("--ridge", type=float, help="extra Coulomb diagonal")
    g.add_argument("--n", type=int, help="dimension for random/spd")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tile", type=int, help="uniform tile size (default: one tile per cluster, or 64)")
    g.add_argument("--eps-lr", type=parse_eps, default=1e-6)
    g.add_argument("--eps-sp", type=parse_eps, default=1e-13)
    g.add_argument("--out", required=True)
    g.add_argument("--report")
    g.set_defaults(func=cmd_gen)

    def grid_flags(q, issue_list: bool):
        q.add_argument("--grid", type=parse_grid, default=(2, 2), help="process grid PRxPC")
        if issue_list:
            q.add_argument("--issue", type=parse_issue_list, default=["opt"],
                           help="issue depth: 1, opt or N; a comma list runs each in turn")
        else:
            q.add_argument("--issue", default="opt", type=lambda s: parse_issue_list(s)[0])
        q.add_argument("--eps-sp", type=parse_eps, default=1e-13)
        q.add_argument("--net-delay-ms", type=float, default=0.0)
        q.add_argument("--jitter-ms", type=float, default=0.0)
        q.add_argument("--workers-per-rank", type=int, default=1)
        q.add_argument("--seed", type=int, default=None, help="scheduler tie-break seed")
        q.add_argument("--report")

    mm = sub.add_parser("multiply", help="C = A B with SUMMA, timed over repeats")
    mm.add_argument("--a", required=True)
    mm.add_argument("--b", required=True)
    grid_flags(mm, issue_list=True)
    mm.add_argument("--eps-lr", type=parse_eps, default=None, help="result truncation (default: exact)")
    mm.add_argument("--repeat", type=int, default=15)
    mm.add_argument("--trace", help="JSON-lines scheduler trace of the last repeat")
    mm.add_argument("--check-tol", type=float, help="fail unless rel. error vs dense product <= this")
    mm.set_defaults(func=cmd_multiply)

    iv = sub.add_parser("invsqrt", help="M^(-1/2) by Newton-Schulz iteration")
    iv.add_argument("--m", required=True)
    grid_flags(iv, issue_list=False)
    iv.add_argument("--eps-lr", type=parse_eps, default=1e-6)
    iv.add_argument("--tol", type=float, default=1e-10)
    iv.add_argument("--max-iter", type=int, default=10)
    iv.add_argument("--hist-iter", type=int, default=5, help="iteration (counting from 1) whose X, Y, Z, T are histogrammed")
    iv.add_argument("--hist")
    iv.add_argument("--out", help="write the result as a CLRM file")
    iv.set_defaults(func=cmd_invsqrt)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = argv
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clrsumma {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionError, FormatError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
