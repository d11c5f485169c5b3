"""Inverse square root by coupled Newton-Schulz iteration on tiled matrices.

With ``Y_0 = M``, ``Z_0 = I`` and a scale ``alpha`` such that
``||alpha M - I||_2 <= 1``, each iteration computes::

    X_n     = alpha Y_n Z_n
    T_n     = (15 I - 10 X_n + 3 X_n^2) / 8
    Z_{n+1} = Z_n T_n
    Y_{n+1} = T_n Y_n

and ``sqrt(alpha) Z_n`` converges to ``M^{-1/2}``.  All products go through
the SUMMA engine; the last two are issued concurrently.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from clrsumma import clr, tiling
from clrsumma.clr import Kind
from clrsumma.kernel import DimensionError
from clrsumma.summa import multiply_async
from clrsumma.tiling import TiledMatrix

ALPHA_SAFETY = 1.01


class NotSPDError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


def choose_alpha(m: TiledMatrix, iters: int = 100, seed: int = 0) -> float:
    """``1 / (1.01 * lambda_max)`` with ``lambda_max`` from power iteration."""
    if m.dims[0] != m.dims[1]:
        raise DimensionError("choose_alpha needs a square matrix")
    lam = tiling.two_norm_estimate(m, iters, seed)
    if not lam > 0:
        raise NotSPDError(f"largest eigenvalue estimate {lam} is not positive")
    return 1.0 / (ALPHA_SAFETY * lam)


def residual(x: TiledMatrix) -> float:
    """``||X - I||_F / sqrt(N)`` evaluated tile by tile."""
    n = x.dims[0]
    sq = 0.0
    for (i, j), blk in x.tiles.items():
        if i == j:
            sq += float(np.sum(np.square(clr.to_dense(blk) - np.eye(blk.rows))))
        else:
            sq += clr.exact_norm(blk) ** 2
    for i in range(x.tile_grid[0]):
        if (i, i) not in x.tiles:
            sq += x.row_tiling.size(i)
    return math.sqrt(sq) / math.sqrt(n)


def rank_histogram(t: TiledMatrix, bins: int | None = None) -> dict[int, int]:
    """Tile counts per stored rank.

    Empty tiles count as rank 0 and dense tiles as full rank.  With ``bins``
    the ranks are grouped into that many equal-width buckets over
    ``[0, full]`` and the keys are bucket indices.
    """
    counts: Counter[int] = Counter()
    full = 0
    for i in range(t.tile_grid[0]):
        for j in range(t.tile_grid[1]):
            blk = t.block(i, j)
            full = max(full, min(blk.rows, blk.cols))
            counts[blk.rank] += 1
    if bins is None:
        return dict(sorted(counts.items()))
    out: Counter[int] = Counter()
    for r, c in counts.items():
        out[min(bins - 1, int(bins * r / (full + 1)))] += c
    return dict(sorted(out.items()))


@dataclass
class InvSqrtResult:
    result: TiledMatrix
    iterations: int
    history: list[float]
    alpha: float
    converged: bool
    times: list[float] = field(default_factory=list)
    snapshots: dict[str, TiledMatrix] = field(default_factory=dict)
    # per iteration: matrix name -> rank histogram
    histograms: list[dict[str, dict[int, int]]] = field(default_factory=list)


def inv_sqrt(
    m: TiledMatrix,
    eps_lr: float | None,
    eps_sp: float,
    tol: float = 1e-10,
    max_iter: int = 10,
    *,
    issue_depth: int | None = None,
    mode: str = "multiple_issue",
    snapshot_iter: int | None = None,
    alpha: float | None = None,
) -> InvSqrtResult:
    """``M^{-1/2}`` for a symmetric positive definite tiled ``M``.

    Iterates until ``||X_n - I||_F / sqrt(N) <= tol`` or ``max_iter``
    iterations.  ``iterations`` counts evaluated ``X_n``.  Three consecutive
    residual increases raise :class:`DivergenceError`.  With
    ``snapshot_iter=n`` the intermediates ``X_n, Y_n, Z_n, T_n`` are kept.
    """
    if m.row_tiling != m.col_tiling:
        raise DimensionError("inv_sqrt needs identical row and column tilings")
    if alpha is None:
        alpha = choose_alpha(m)
    grid = m.grid
    ident = tiling.identity(m.row_tiling, grid, eps_lr, eps_sp)
    y = m if m.eps_lr == eps_lr else m.with_tiles(dict(m.tiles), eps_lr=eps_lr)
    z = ident
    opts = dict(issue_depth=issue_depth, mode=mode, eps_lr=eps_lr)

    history: list[float] = []
    times: list[float] = []
    snapshots: dict[str, TiledMatrix] = {}
    hists: list[dict[str, dict[int, int]]] = []
    rises = 0
    converged = False
    for n in range(max_iter):
        t0 = time.perf_counter()
        x = multiply_async(y, z, eps_sp, label="YZ", **opts).wait().result
        x = tiling.scale(x, alpha)
        res = residual(x)
        history.append(res)
        if len(history) > 1 and res > history[-2]:
            rises += 1
            if rises >= 3:
                raise DivergenceError(f"residual rose 3 times in a row at iteration {n}", history)
        else:
            rises = 0
        if res <= tol:
            converged = True
            hists.append({"X": rank_histogram(x), "Y": rank_histogram(y), "Z": rank_histogram(z)})
            times.append(time.perf_counter() - t0)
            break
        x2 = multiply_async(x, x, eps_sp, label="XX", **opts).wait().result
        t = tiling.linear_combination(
            [(-10 / 8, x), (3 / 8, x2)], identity_coef=15 / 8, eps_lr=eps_lr, eps_sp=eps_sp
        )
        hists.append({k: rank_histogram(v) for k, v in (("X", x), ("Y", y), ("Z", z), ("T", t))})
        if snapshot_iter is not None and n == snapshot_iter:
            snapshots = {"X": x, "Y": y, "Z": z, "T": t}
        zt = multiply_async(z, t, eps_sp, label="ZT", **opts)
        ty = multiply_async(t, y, eps_sp, label="TY", **opts)
        z = zt.wait().result
        y = ty.wait().result
        times.append(time.perf_counter() - t0)

    return InvSqrtResult(
        result=tiling.scale(z, math.sqrt(alpha)),
        iterations=len(history),
        history=history,
        alpha=alpha,
        converged=converged,
        times=times,
        snapshots=snapshots,
        histograms=hists,
    )
