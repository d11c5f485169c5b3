"""Tiled (block-distributed) matrices, tile-norm shapes and the CLRM file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from clrsumma import clr
from clrsumma.clr import Block, Kind
from clrsumma.kernel import DimensionError, as_matrix, power_iteration
from clrsumma.runtime import PRIORITY_COMPUTE, ProcessGrid


class FormatError(ValueError):
    """Malformed or unsupported CLRM file."""


@dataclass(frozen=True)
class Tiling:
    """Partition of ``range(extent)`` into contiguous, possibly uneven tiles."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise ValueError("tiling needs at least one tile and must start at 0")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError(f"tile boundaries must be strictly increasing: {b}")

    @classmethod
    def uniform(cls, extent: int, tile: int) -> Tiling:
        bounds = list(range(0, extent, tile)) + [extent]
        return cls(tuple(bounds))

    @property
    def n_tiles(self) -> int:
        return len(self.boundaries) - 1

    @property
    def extent(self) -> int:
        return self.boundaries[-1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def size(self, i: int) -> int:
        return self.boundaries[i + 1] - self.boundaries[i]

    def slice(self, i: int) -> slice:
        return slice(self.boundaries[i], self.boundaries[i + 1])


@dataclass
class Shape:
    """Per-tile Frobenius-norm upper bounds; a zero bound marks an empty tile."""

    bounds: np.ndarray
    row_sizes: np.ndarray
    col_sizes: np.ndarray
    eps_sp: float = 0.0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if np.any(self.bounds < 0):
            raise ValueError("norm bounds must be non-negative")

    @property
    def areas(self) -> np.ndarray:
        return np.outer(self.row_sizes, self.col_sizes).astype(np.float64)

    def nonzero(self) -> np.ndarray:
        return self.bounds > 0


def product_shape(a: Shape, b: Shape, eps_sp: float) -> Shape:
    """Norm bounds of ``A @ B`` with screening.

    ``bound[i, j] = sum_k a[i, k] * b[k, j]`` (triangle inequality plus
    submultiplicativity); tiles whose bound is ``<= eps_sp * area`` are
    marked empty and will never be computed.
    """
    if a.bounds.shape[1] != b.bounds.shape[0]:
        raise DimensionError(f"shape grids {a.bounds.shape} and {b.bounds.shape} do not chain")
    bounds = a.bounds @ b.bounds
    out = Shape(bounds, a.row_sizes, b.col_sizes, eps_sp)
    bounds[bounds <= eps_sp * out.areas] = 0.0
    return out


@dataclass(eq=False)
class TiledMatrix:
    """A block-cyclically distributed matrix of CLR tiles.

    ``tiles`` holds only non-empty tiles; tile ``(i, j)`` lives on rank
    ``grid.owner(i, j)``.  ``eps_lr=None`` marks a dense-mode matrix, in
    which no tile is ever stored in factored form.
    """

    row_tiling: Tiling
    col_tiling: Tiling
    grid: ProcessGrid
    tiles: dict[tuple[int, int], Block] = field(default_factory=dict)
    eps_lr: float | None = None
    eps_sp: float = 0.0

    def __post_init__(self):
        for (i, j), blk in list(self.tiles.items()):
            if blk.is_empty:
                del self.tiles[(i, j)]
                continue
            if blk.shape != (self.row_tiling.size(i), self.col_tiling.size(j)):
                raise DimensionError(f"tile {(i, j)} has shape {blk.shape}")

    @property
    def dims(self) -> tuple[int, int]:
        return (self.row_tiling.extent, self.col_tiling.extent)

    @property
    def tile_grid(self) -> tuple[int, int]:
        return (self.row_tiling.n_tiles, self.col_tiling.n_tiles)

    @property
    def shape(self) -> Shape:
        bounds = np.zeros(self.tile_grid)
        for (i, j), blk in self.tiles.items():
            bounds[i, j] = blk.norm_bound
        return Shape(bounds, self.row_tiling.sizes, self.col_tiling.sizes, self.eps_sp)

    def owner(self, i: int, j: int) -> int:
        return self.grid.owner(i, j)

    def block(self, i: int, j: int) -> Block:
        blk = self.tiles.get((i, j))
        if blk is None:
            return clr.empty(self.row_tiling.size(i), self.col_tiling.size(j))
        return blk

    def local_tiles(self, rank: int) -> dict[tuple[int, int], Block]:
        return {ij: b for ij, b in self.tiles.items() if self.owner(*ij) == rank}

    def local_bytes(self, rank: int) -> int:
        return sum(b.nbytes for b in self.local_tiles(rank).values())

    @property
    def storage_bytes(self) -> int:
        return sum(b.nbytes for b in self.tiles.values())

    def zero_fraction(self) -> float:
        """Fraction of matrix elements lying in empty tiles."""
        total = self.dims[0] * self.dims[1]
        nz = sum(b.rows * b.cols for b in self.tiles.values())
        return 1.0 - nz / total

    def with_tiles(self, tiles: dict, eps_lr="same") -> TiledMatrix:
        return TiledMatrix(
            self.row_tiling,
            self.col_tiling,
            self.grid,
            tiles,
            self.eps_lr if eps_lr == "same" else eps_lr,
            self.eps_sp,
        )


# --------------------------------------------------------------------------
# construction and gathering


def from_dense(
    m,
    rt: Tiling,
    ct: Tiling,
    eps_lr: float | None,
    eps_sp: float,
    grid: ProcessGrid,
) -> TiledMatrix:
    """Tile and compress a dense matrix.

    Tiles with Frobenius norm ``<= eps_sp * area`` are dropped.  With
    ``eps_lr=None`` tiles are kept dense.
    """
    m = as_matrix(m)
    if m.shape != (rt.extent, ct.extent):
        raise DimensionError(f"tilings span {(rt.extent, ct.extent)}, matrix is {m.shape}")
    tiles = {}
    for i in range(rt.n_tiles):
        for j in range(ct.n_tiles):
            t = m[rt.slice(i), ct.slice(j)]
            norm = float(np.linalg.norm(t))
            if norm <= eps_sp * t.size:
                continue
            blk = clr.dense(t.copy(order="F"), norm) if eps_lr is None else clr.compress(t, eps_lr)
            if not blk.is_empty:
                tiles[(i, j)] = blk
    return TiledMatrix(rt, ct, grid, tiles, eps_lr, eps_sp)


def gather_dense(t: TiledMatrix) -> np.ndarray:
    out = np.zeros(t.dims, order="F")
    for (i, j), blk in t.tiles.items():
        out[t.row_tiling.slice(i), t.col_tiling.slice(j)] = clr.to_dense(blk)
    return out


def identity(tiling: Tiling, grid: ProcessGrid, eps_lr: float | None = None, eps_sp: float = 0.0) -> TiledMatrix:
    tiles = {(i, i): clr.identity(tiling.size(i)) for i in range(tiling.n_tiles)}
    return TiledMatrix(tiling, tiling, grid, tiles, eps_lr, eps_sp)


# --------------------------------------------------------------------------
# tile-wise operations


def tilewise(
    grid: ProcessGrid,
    keys: Iterable[tuple[int, int]],
    fn: Callable[[int, int], Block],
    label: str = "tilewise",
) -> dict[tuple[int, int], Block]:
    """Run ``fn(i, j)`` as one task per tile on the tile's owner rank."""
    job = grid.new_job(label)
    out: dict[tuple[int, int], Block] = {}

    def run(i, j):
        out[(i, j)] = fn(i, j)

    for i, j in keys:
        grid.when_all((), lambda i=i, j=j: run(i, j), PRIORITY_COMPUTE, rank=grid.owner(i, j), job=job, name=label)
    job.wait()
    return {k: v for k, v in out.items() if not v.is_empty}


def scale(t: TiledMatrix, alpha: float) -> TiledMatrix:
    tiles = tilewise(t.grid, list(t.tiles), lambda i, j: clr.scale(t.tiles[(i, j)], alpha), "scale")
    return t.with_tiles(tiles)


def linear_combination(
    terms: list[tuple[float, TiledMatrix]],
    *,
    identity_coef: float = 0.0,
    eps_lr: float | None = None,
    eps_sp: float = 0.0,
) -> TiledMatrix:
    """``sum_c c * T_c + identity_coef * I``, tile by tile.

    Each output tile is accumulated in factored form and then finalized
    (recompressed) with ``eps_lr``; tiles whose norm ends up
    ``<= eps_sp * area`` are dropped.
    """
    ref = terms[0][1]
    keys = set()
    for _, t in terms:
        if t.row_tiling != ref.row_tiling or t.col_tiling != ref.col_tiling:
            raise DimensionError("linear_combination operands are tiled differently")
        keys.update(t.tiles)
    if identity_coef:
        if ref.row_tiling != ref.col_tiling:
            raise DimensionError("identity term needs a square tiling")
        keys.update((i, i) for i in range(ref.row_tiling.n_tiles))

    def combine(i, j):
        acc = None
        for coef, t in terms:
            blk = t.tiles.get((i, j))
            if blk is not None and coef != 0.0:
                acc = clr.accumulate(acc, clr.scale(blk, coef), eps_lr)
        if identity_coef and i == j:
            eye = clr.scale(clr.identity(ref.row_tiling.size(i)), identity_coef)
            acc = clr.accumulate(acc, eye, eps_lr)
        if acc is None:
            return clr.empty(ref.row_tiling.size(i), ref.col_tiling.size(j))
        acc = clr.finalize(acc, eps_lr)
        if not acc.is_empty:
            exact = clr.exact_norm(acc)
            if exact <= eps_sp * acc.rows * acc.cols:
                return clr.empty(acc.rows, acc.cols)
        return acc

    tiles = tilewise(ref.grid, sorted(keys), combine, "axpy")
    return TiledMatrix(ref.row_tiling, ref.col_tiling, ref.grid, tiles, eps_lr, eps_sp)


def matvec(t: TiledMatrix, v: np.ndarray) -> np.ndarray:
    out = np.zeros(t.dims[0])
    for (i, j), blk in t.tiles.items():
        vj = v[t.col_tiling.slice(j)]
        if blk.kind is Kind.DENSE:
            out[t.row_tiling.slice(i)] += blk.dense @ vj
        else:
            out[t.row_tiling.slice(i)] += blk.x @ (blk.w.T @ vj)
    return out


def two_norm_estimate(t: TiledMatrix, iters: int = 100, seed: int = 0) -> float:
    if t.dims[0] != t.dims[1]:
        raise DimensionError("two_norm_estimate needs a square matrix")
    return power_iteration(lambda v: matvec(t, v), t.dims[0], iters, seed)


def frobenius_norm(t: TiledMatrix) -> float:
    return float(np.sqrt(sum(clr.exact_norm(b) ** 2 for b in t.tiles.values())))


def panel_occupancy(a: TiledMatrix, b: TiledMatrix) -> tuple[float, float]:
    """Mean number of grid rows / columns holding non-empty panel tiles.

    Averaged over inner tile index ``k``: grid rows holding any non-empty
    ``A[:, k]`` tile, and grid columns holding any non-empty ``B[k, :]`` tile.
    """
    pr, pc = a.grid.pr, a.grid.pc
    K = a.tile_grid[1]
    rows = [set() for _ in range(K)]
    cols = [set() for _ in range(K)]
    for i, k in a.tiles:
        rows[k].add(i % pr)
    for k, j in b.tiles:
        cols[k].add(j % pc)
    return (sum(map(len, rows)) / K, sum(map(len, cols)) / K)


# --------------------------------------------------------------------------
# CLRM file format (little endian)

MAGIC = b"CLRM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQII")
_TILE = struct.Struct("<BId")


def save(t: TiledMatrix, path) -> int:
    """Write ``t`` to ``path``; returns the number of bytes written."""
    rt, ct = t.row_tiling, t.col_tiling
    parts = [
        _HEADER.pack(MAGIC, VERSION, rt.extent, ct.extent, rt.n_tiles, ct.n_tiles),
        np.asarray(rt.boundaries, dtype="<u8").tobytes(),
        np.asarray(ct.boundaries, dtype="<u8").tobytes(),
    ]
    for i in range(rt.n_tiles):
        for j in range(ct.n_tiles):
            blk = t.block(i, j)
            rank = blk.rank if blk.kind is Kind.LOWRANK else 0
            parts.append(_TILE.pack(int(blk.kind), rank, blk.norm_bound))
            if blk.kind is Kind.DENSE:
                parts.append(_f64(blk.dense))
            elif blk.kind is Kind.LOWRANK:
                parts.append(_f64(blk.x))
                parts.append(_f64(blk.w))
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


def _f64(m: np.ndarray) -> bytes:
    return np.asarray(m, dtype="<f8").tobytes(order="F")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(8 * rows * cols)
        return np.frombuffer(raw, dtype="<f8").reshape((rows, cols), order="F").astype(np.float64, order="F")


def load(path, grid: ProcessGrid, eps_lr: float | None = None, eps_sp: float = 0.0) -> TiledMatrix:
    """Read a CLRM file.

    The format does not record the compression thresholds, so they are
    supplied by the caller.
    """
    r = _Reader(Path(path).read_bytes())
    magic, version, rows, cols, nrt, nct = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CLRM version {version}")
    rb = np.frombuffer(r.take(8 * (nrt + 1)), dtype="<u8")
    cb = np.frombuffer(r.take(8 * (nct + 1)), dtype="<u8")
    try:
        rt, ct = Tiling(tuple(rb.tolist())), Tiling(tuple(cb.tolist()))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if rt.extent != rows or ct.extent != cols:
        raise FormatError("tile boundaries do not match matrix dimensions")
    tiles = {}
    for i in range(nrt):
        for j in range(nct):
            tag, rank, bound = _TILE.unpack(r.take(_TILE.size))
            m, n = rt.size(i), ct.size(j)
            if tag == Kind.EMPTY:
                continue
            if tag == Kind.DENSE:
                tiles[(i, j)] = Block(Kind.DENSE, m, n, bound, dense=r.matrix(m, n))
            elif tag == Kind.LOWRANK:
                if rank < 1:
                    raise FormatError(f"low-rank tile {(i, j)} with rank 0")
                x = r.matrix(m, rank)
                w = r.matrix(n, rank)
                tiles[(i, j)] = Block(Kind.LOWRANK, m, n, bound, x=x, w=w)
            else:
                raise FormatError(f"unknown tile tag {tag}")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes")
    return TiledMatrix(rt, ct, grid, tiles, eps_lr, eps_sp)


def expected_file_size(t: TiledMatrix) -> int:
    """Size accounting from the format definition alone."""
    rt, ct = t.row_tiling, t.col_tiling
    size = 4 + 4 + 8 + 8 + 4 + 4 + 8 * (rt.n_tiles + 1) + 8 * (ct.n_tiles + 1)
    for i in range(rt.n_tiles):
        for j in range(ct.n_tiles):
            blk = t.block(i, j)
            size += 1 + 4 + 8
            if blk.kind is Kind.DENSE:
                size += 8 * blk.rows * blk.cols
            elif blk.kind is Kind.LOWRANK:
                size += 8 * blk.rank * (blk.rows + blk.cols)
    return size
