"""Dense tile kernels.

A dense matrix here is a 2-D ``float64`` numpy array in column-major
(Fortran) order.  Everything in this module is a pure function of its
inputs, so it can be called from any worker thread.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(data, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``data`` to a column-major float64 matrix."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if check_finite and not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return np.asfortranarray(m)


def gemm(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray | None = None,
    alpha: float = 1.0,
    accumulate: bool = False,
) -> np.ndarray:
    """Return ``alpha * a @ b`` (plus ``c`` when ``accumulate``).

    Inputs are never modified.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"gemm: cannot multiply {a.shape} by {b.shape}")
    out = np.asfortranarray(a @ b)
    if alpha != 1.0:
        out *= alpha
    if accumulate:
        if c is None or c.shape != out.shape:
            got = None if c is None else c.shape
            raise DimensionError(f"gemm: accumulator shape {got} != {out.shape}")
        out += c
    return out


def frobenius_norm(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.sqrt(np.sum(np.square(m))))


class PivotedQR(NamedTuple):
    q: np.ndarray  # rows x rank, orthonormal columns
    r: np.ndarray  # rank x cols, upper trapezoidal
    perm: np.ndarray  # m[:, perm] ~= q @ r
    rank: int


def cpqr(m: np.ndarray, tol: float) -> PivotedQR:
    """Column-pivoted Householder QR truncated at Frobenius error ``tol``.

    The rank is the smallest ``k`` such that the trailing block
    ``R[k:, k:]`` of the full pivoted factorization has Frobenius norm
    ``<= tol``; that trailing block is exactly ``m[:, perm] - q @ r``.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    rows, cols = m.shape
    if m.size == 0 or not np.any(m):
        return PivotedQR(
            np.zeros((rows, 0), order="F"),
            np.zeros((0, cols), order="F"),
            np.arange(cols),
            0,
        )
    q, r, perm = scipy.linalg.qr(m, mode="economic", pivoting=True)
    # tail[k] = ||R[k:, :]||_F; rows below k are zero left of column k
    row_sq = np.sum(np.square(r), axis=1)
    tail = np.sqrt(np.concatenate([np.cumsum(row_sq[::-1])[::-1], [0.0]]))
    rank = int(np.argmax(tail <= tol))
    return PivotedQR(
        np.asfortranarray(q[:, :rank]),
        np.asfortranarray(r[:rank, :]),
        perm,
        rank,
    )


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray], n: int, iters: int = 100, seed: int = 0
) -> float:
    """Rayleigh-quotient power iteration for a symmetric operator of size ``n``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    lam = 0.0
    for _ in range(max(iters, 1)):
        w = matvec(v)
        vv = float(v @ v)
        lam_new = float(v @ w) / vv
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        converged = abs(lam_new - lam) <= 1e-15 * abs(lam_new)
        lam = lam_new
        if converged:
            break
        v = w / nw
    return lam


def two_norm_estimate(m: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Estimate the largest-magnitude eigenvalue of a symmetric matrix."""
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"two_norm_estimate needs a square matrix, got {m.shape}")
    return power_iteration(lambda v: m @ v, m.shape[0], iters, seed)
