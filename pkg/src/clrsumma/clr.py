"""Clustered low-rank (CLR) tile arithmetic.

Each tile is one of three immutable payloads:

* ``EMPTY``: exactly zero, nothing stored;
* ``DENSE``: a full ``rows x cols`` matrix;
* ``LOWRANK``: thin factors ``x`` (rows x r) and ``w`` (cols x r) with
  ``tile = x @ w.T``.

A stored low-rank tile never has ``r > min(rows, cols) / 2``; above that the
dense form is both smaller and cheaper to multiply.  Every block carries an
upper bound on its Frobenius norm that the screening logic relies on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from clrsumma.kernel import DimensionError, cpqr, frobenius_norm, gemm


class Kind(enum.IntEnum):
    EMPTY = 0
    DENSE = 1
    LOWRANK = 2


@dataclass(frozen=True, eq=False, slots=True)
class Block:
    kind: Kind
    rows: int
    cols: int
    norm_bound: float
    dense: np.ndarray | None = None
    x: np.ndarray | None = None
    w: np.ndarray | None = None

    @property
    def rank(self) -> int:
        """Stored rank: 0 for empty, ``min(rows, cols)`` for dense."""
        if self.kind is Kind.EMPTY:
            return 0
        if self.kind is Kind.DENSE:
            return min(self.rows, self.cols)
        return self.x.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nbytes(self) -> int:
        if self.kind is Kind.EMPTY:
            return 0
        if self.kind is Kind.DENSE:
            return self.dense.nbytes
        return self.x.nbytes + self.w.nbytes

    @property
    def is_empty(self) -> bool:
        return self.kind is Kind.EMPTY

    def __repr__(self) -> str:
        return (
            f"Block({self.kind.name}, {self.rows}x{self.cols}, rank={self.rank}, "
            f"norm_bound={self.norm_bound:.3g})"
        )


def empty(rows: int, cols: int) -> Block:
    return Block(Kind.EMPTY, rows, cols, 0.0)


def dense(m: np.ndarray, norm_bound: float | None = None) -> Block:
    m = np.asfortranarray(m, dtype=np.float64)
    if norm_bound is None:
        norm_bound = frobenius_norm(m)
    return Block(Kind.DENSE, m.shape[0], m.shape[1], norm_bound, dense=m)


def lowrank_norm(x: np.ndarray, w: np.ndarray) -> float:
    """Frobenius norm of ``x @ w.T`` from the two ``r x r`` Gram matrices."""
    sq = float(np.sum((x.T @ x) * (w.T @ w)))
    return float(np.sqrt(max(sq, 0.0)))


def lowrank(x: np.ndarray, w: np.ndarray, norm_bound: float | None = None) -> Block:
    """Build a factored block, falling back to dense above half rank."""
    rows, r = x.shape
    cols = w.shape[0]
    if w.shape[1] != r:
        raise DimensionError(f"factor ranks differ: {x.shape} vs {w.shape}")
    if r == 0:
        return empty(rows, cols)
    if 2 * r > min(rows, cols):
        return dense(gemm(x, w.T), norm_bound)
    if norm_bound is None:
        norm_bound = lowrank_norm(x, w)
    return Block(
        Kind.LOWRANK,
        rows,
        cols,
        norm_bound,
        x=np.asfortranarray(x),
        w=np.asfortranarray(w),
    )


def identity(n: int) -> Block:
    return dense(np.eye(n, order="F"))


def to_dense(b: Block) -> np.ndarray:
    if b.kind is Kind.EMPTY:
        return np.zeros((b.rows, b.cols), order="F")
    if b.kind is Kind.DENSE:
        return b.dense.copy(order="F")
    return gemm(b.x, b.w.T)


def exact_norm(b: Block) -> float:
    if b.kind is Kind.EMPTY:
        return 0.0
    if b.kind is Kind.DENSE:
        return frobenius_norm(b.dense)
    return lowrank_norm(b.x, b.w)


def _factor(m: np.ndarray, eps_lr: float) -> tuple[np.ndarray, np.ndarray]:
    """Truncated ``m ~= x @ w.T`` from pivoted QR (x = Q_r, w.T = R_r P.T)."""
    q, r, perm, rank = cpqr(m, eps_lr)
    w = np.empty((m.shape[1], rank), order="F")
    w[perm, :] = r.T
    return q, w


def compress(m: np.ndarray, eps_lr: float) -> Block:
    """Compress a dense tile to within ``eps_lr`` in Frobenius norm."""
    if eps_lr < 0:
        raise ValueError("eps_lr must be non-negative")
    rows, cols = m.shape
    x, w = _factor(m, eps_lr)
    r = x.shape[1]
    if r == 0:
        return empty(rows, cols)
    if 2 * r > min(rows, cols):
        return dense(m.copy(order="F"))
    return lowrank(x, w)


def block_multiply(a: Block, b: Block) -> Block:
    """Exact product of two tiles, kept in the most compact factored form."""
    if a.cols != b.rows:
        raise DimensionError(f"block_multiply: {a.shape} x {b.shape}")
    rows, cols = a.rows, b.cols
    bound = a.norm_bound * b.norm_bound
    if a.is_empty or b.is_empty:
        return empty(rows, cols)
    ka, kb = a.kind, b.kind
    if ka is Kind.DENSE and kb is Kind.DENSE:
        return dense(gemm(a.dense, b.dense), bound)
    if ka is Kind.LOWRANK and kb is Kind.LOWRANK:
        z = gemm(a.w.T, b.x)  # r_A x r_B
        if b.rank <= a.rank:
            # output rank r_B
            return lowrank(gemm(a.x, z), b.w, bound)
        return lowrank(a.x, gemm(b.w, z.T), bound)
    if ka is Kind.DENSE:
        return lowrank(gemm(a.dense, b.x), b.w, bound)
    return lowrank(a.x, gemm(b.dense.T, a.w), bound)


def block_add_accumulate(c: Block, addend: Block) -> Block:
    """``c + addend`` without truncation.

    Two factored blocks are joined by concatenating their factors, so the
    result rank is the sum of the input ranks and may exceed the half-rank
    limit until :func:`recompress` is applied.
    """
    if c.shape != addend.shape:
        raise DimensionError(f"block_add: {c.shape} + {addend.shape}")
    if c.is_empty:
        return addend
    if addend.is_empty:
        return c
    bound = c.norm_bound + addend.norm_bound
    if c.kind is Kind.LOWRANK and addend.kind is Kind.LOWRANK:
        x = np.concatenate([c.x, addend.x], axis=1)
        w = np.concatenate([c.w, addend.w], axis=1)
        return Block(
            Kind.LOWRANK,
            c.rows,
            c.cols,
            bound,
            x=np.asfortranarray(x),
            w=np.asfortranarray(w),
        )
    if c.kind is Kind.DENSE and addend.kind is Kind.DENSE:
        return dense(c.dense + addend.dense, bound)
    if c.kind is Kind.DENSE:
        return dense(gemm(addend.x, addend.w.T, c.dense, accumulate=True), bound)
    return dense(gemm(c.x, c.w.T, addend.dense, accumulate=True), bound)


def recompress(b: Block, eps_lr: float) -> Block:
    """Re-truncate a factored block; dense and empty blocks pass through."""
    if b.kind is not Kind.LOWRANK:
        return b
    qx, rx = np.linalg.qr(b.x)
    qw, rw = np.linalg.qr(b.w)
    core = gemm(rx, rw.T)
    xm, wm = _factor(core, eps_lr)
    r = xm.shape[1]
    if r == 0:
        return empty(b.rows, b.cols)
    if 2 * r > min(b.rows, b.cols):
        return dense(to_dense(b))
    return lowrank(gemm(qx, xm), gemm(qw, wm))


def accumulate(c: Block | None, addend: Block, eps_lr: float | None) -> Block:
    """Reduction step used by the multiply engine.

    A factored partial sum whose rank passes the half-rank limit is switched
    to dense form.  That step is lossless; truncation to ``eps_lr`` happens
    once, in :func:`finalize`, after the whole sum is known (partial sums
    may be large and cancel later).
    """
    if c is None:
        return addend
    s = block_add_accumulate(c, addend)
    if s.kind is Kind.LOWRANK and 2 * s.rank > min(s.rows, s.cols):
        return dense(to_dense(s), s.norm_bound)
    return s


def finalize(b: Block, eps_lr: float | None) -> Block:
    """Final compression of a fully reduced output tile.

    Dense tiles are re-examined as well so that tile ranks can shrink again
    between multiplies.  The norm bound is reset to the norm of the stored
    data.  ``eps_lr=None`` keeps everything dense.
    """
    if b.is_empty:
        return b
    if eps_lr is None:
        return dense(to_dense(b)) if b.kind is Kind.LOWRANK else dense(b.dense)
    if b.kind is Kind.LOWRANK:
        return recompress(b, eps_lr)
    return compress(b.dense, eps_lr)


def scale(b: Block, alpha: float) -> Block:
    if b.is_empty or alpha == 0.0:
        return empty(b.rows, b.cols)
    bound = abs(alpha) * b.norm_bound
    if b.kind is Kind.DENSE:
        return dense(alpha * b.dense, bound)
    return Block(Kind.LOWRANK, b.rows, b.cols, bound, x=alpha * b.x, w=b.w)
