"""Task-based SUMMA over a simulated process grid.

``C = A @ B`` with C stationary.  For every inner tile index ``k`` the owner
of each ``A[i, k]`` broadcasts it along its grid row and the owner of each
``B[k, j]`` broadcasts it along its grid column, one send task per tile and
destination.  Each rank then runs one compute task per owned output tile
that receives a contribution from ``k``.

Every rank keeps at most ``issue_depth`` of its iterations in flight and
issues the next one as soon as an earlier one retires.  A contribution is
applied as a fused update (``C += A B`` in one task) when no other
contribution to that tile is in flight; otherwise it is split into a
multiply task producing a temporary and a separately scheduled reduction.
Reductions into a tile always happen in ascending ``k``, so results do not
depend on timing.

``mode="single_issue"`` is the classic algorithm: one iteration in flight
per rank and an iteration retires only after its updates are applied, so
the next broadcasts wait on the previous rank-k update.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from clrsumma import clr
from clrsumma.kernel import DimensionError
from clrsumma.runtime import (
    PRIORITY_COMPUTE,
    PRIORITY_RELEASE,
    Job,
    MemoryLedger,
    Task,
    default_issue_depth,
)
from clrsumma.tiling import Shape, TiledMatrix, product_shape

MODES = ("multiple_issue", "single_issue")


@dataclass
class MultiplyPlan:
    k_iters: int
    issue_depth: int
    mode: str
    result_shape: Shape
    # output tile -> contributing k, ascending
    contributions: dict[tuple[int, int], list[int]]
    # rank -> k -> owned output tiles updated in iteration k
    work: dict[int, dict[int, list[tuple[int, int]]]]
    # panel tile -> ranks that need it
    a_dests: dict[tuple[int, int], set[int]]
    b_dests: dict[tuple[int, int], set[int]]
    # rank -> iterations it takes part in (computing or sending), ascending
    rank_iters: dict[int, list[int]]

    @property
    def iterations(self) -> list[int]:
        """Iterations that are not screened out entirely."""
        ks = set()
        for lst in self.contributions.values():
            ks.update(lst)
        return sorted(ks)

    @property
    def n_contributions(self) -> int:
        return sum(len(v) for v in self.contributions.values())


def plan_multiply(
    a: TiledMatrix,
    b: TiledMatrix,
    eps_sp: float,
    issue_depth: int | None = None,
    mode: str = "multiple_issue",
) -> MultiplyPlan:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if a.col_tiling != b.row_tiling:
        raise DimensionError("inner tilings of A and B differ")
    if a.grid is not b.grid:
        raise ValueError("operands live on different grids")
    grid = a.grid
    K = a.tile_grid[1]
    if mode == "single_issue":
        depth = 1
    else:
        depth = default_issue_depth(grid.pr, grid.pc) if issue_depth is None else int(issue_depth)
        if depth < 1:
            raise ValueError("issue depth must be >= 1")
    depth = max(1, min(depth, K))

    shape = product_shape(a.shape, b.shape, eps_sp)
    keep = shape.bounds > 0
    a_rows: dict[int, list[int]] = defaultdict(list)
    b_cols: dict[int, list[int]] = defaultdict(list)
    for i, k in sorted(a.tiles):
        a_rows[k].append(i)
    for k, j in sorted(b.tiles):
        b_cols[k].append(j)

    contributions: dict[tuple[int, int], list[int]] = defaultdict(list)
    work: dict[int, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    a_dests: dict[tuple[int, int], set[int]] = defaultdict(set)
    b_dests: dict[tuple[int, int], set[int]] = defaultdict(set)
    rank_iters: dict[int, set[int]] = defaultdict(set)
    for k in range(K):
        for i in a_rows.get(k, ()):
            for j in b_cols.get(k, ()):
                if not keep[i, j]:
                    continue
                p = grid.owner(i, j)
                contributions[(i, j)].append(k)
                work[p][k].append((i, j))
                a_dests[(i, k)].add(p)
                b_dests[(k, j)].add(p)
                rank_iters[p].add(k)
    for (i, k) in a_dests:
        rank_iters[grid.owner(i, k)].add(k)
    for (k, j) in b_dests:
        rank_iters[grid.owner(k, j)].add(k)

    return MultiplyPlan(
        k_iters=K,
        issue_depth=depth,
        mode=mode,
        result_shape=shape,
        contributions=dict(contributions),
        work={p: dict(v) for p, v in work.items()},
        a_dests=dict(a_dests),
        b_dests=dict(b_dests),
        rank_iters={p: sorted(v) for p, v in rank_iters.items()},
    )


@dataclass
class MultiplyReport:
    result: TiledMatrix
    plan: MultiplyPlan
    ledger: MemoryLedger
    wall_time: float
    n_tasks: int
    n_fused: int
    n_split: int
    leaked: list = field(default_factory=list)
    quiescent: bool = True
    trace: list[dict] = field(default_factory=list)

    @property
    def peak_elements(self) -> list[float]:
        return [p / 8 for p in self.ledger.peak]


class _Acc:
    """Reduction state of one output tile (single writer)."""

    __slots__ = ("i", "j", "rank", "ks", "pos", "value", "inflight", "temps", "busy", "done")

    def __init__(self, i, j, rank, ks):
        self.i, self.j, self.rank, self.ks = i, j, rank, ks
        self.pos = 0
        self.value: clr.Block | None = None
        self.inflight = 0
        self.temps: dict[int, clr.Block] = {}
        self.busy = False
        self.done = False


class PendingMultiply:
    """A multiply in flight on the grid; :meth:`wait` returns its report."""

    def __init__(self, a, b, eps_sp, issue_depth, mode, eps_lr, label):
        self.a, self.b = a, b
        self.grid = grid = a.grid
        self.plan = plan_multiply(a, b, eps_sp, issue_depth, mode)
        if eps_lr == "auto":
            given = [e for e in (a.eps_lr, b.eps_lr) if e is not None]
            eps_lr = min(given) if given else None
        self.eps_lr = eps_lr
        self.eps_sp = eps_sp
        self.single = mode == "single_issue"
        self.job: Job = grid.new_job(label)
        self.ledger = MemoryLedger(grid.size)
        self.out_tiles: dict[tuple[int, int], clr.Block] = {}
        self.accs = {
            ij: _Acc(ij[0], ij[1], grid.owner(*ij), ks) for ij, ks in self.plan.contributions.items()
        }
        self.remaining: dict[tuple[int, int], int] = {}
        self.next_iter = {p: 0 for p in self.plan.rank_iters}
        self.refs: dict[tuple[int, object], int] = defaultdict(int)
        self.n_fused = 0
        self.n_split = 0

        for p in range(grid.size):
            self.ledger.alloc(p, ("A", p), a.local_bytes(p))
            self.ledger.alloc(p, ("B", p), b.local_bytes(p))

        self.t0 = time.perf_counter()
        with grid._cv:
            for p, ks in self.plan.rank_iters.items():
                for _ in range(min(self.plan.issue_depth, len(ks))):
                    self._issue_next(p)

    # -- iteration management (all called with the grid lock held) --------

    def _issue_next(self, p: int) -> None:
        idx = self.next_iter[p]
        ks = self.plan.rank_iters[p]
        if idx >= len(ks):
            return
        self.next_iter[p] = idx + 1
        self._issue(p, ks[idx])

    def _retire_one(self, p: int, k: int) -> None:
        key = (p, k)
        self.remaining[key] -= 1
        if self.remaining[key] == 0:
            del self.remaining[key]
            self._issue_next(p)

    def _issue(self, p: int, k: int) -> None:
        grid, plan, job = self.grid, self.plan, self.job
        row, col = grid.coords(p)
        count = 0
        local: dict[object, object] = {}

        # panel tiles rooted here
        for panel, mat, dests, group in (
            ("A", self.a, plan.a_dests, grid.row_group(row)),
            ("B", self.b, plan.b_dests, grid.col_group(col)),
        ):
            tiles, targets = {}, {}
            # block-cyclic: rank p roots panel tiles in its own grid row / column
            if panel == "A":
                ids = [(i, k) for i in range(row, mat.tile_grid[0], grid.pr)] if k % grid.pc == col else []
            else:
                ids = [(k, j) for j in range(col, mat.tile_grid[1], grid.pc)] if k % grid.pr == row else []
            for ij in ids:
                if ij in dests:
                    tiles[ij] = mat.tiles[ij]
                    targets[ij] = dests[ij]
            if not tiles:
                continue
            epoch = (job.id, panel, k, p)
            bc = grid.broadcast_tiles(group, p, tiles, epoch, job=job, destinations=targets)
            for (dst, ij), fut in bc.futures.items():
                if dst == p:
                    local[(panel, ij)] = fut
                else:
                    tag = (epoch, ij)
                    nbytes = tiles[ij].nbytes
                    fut._add_callback(
                        lambda _v, dst=dst, tag=tag, nbytes=nbytes: self.ledger.alloc(dst, ("panel", tag), nbytes)
                    )
            for t in bc.sends:
                t.meta.update(k=k, kind="send")
                t.result._add_callback(lambda _v, p=p, k=k: self._retire_one(p, k))
                count += 1

        mailbox = grid.ranks[p].mailbox
        for i, j in plan.work.get(p, {}).get(k, ()):
            fa, ra = self._panel_future(p, local, mailbox, "A", (i, k), grid.owner(i, k))
            fb, rb = self._panel_future(p, local, mailbox, "B", (k, j), grid.owner(k, j))
            self.refs[ra] += 1
            self.refs[rb] += 1
            acc = self.accs[(i, j)]
            fused = self.single or acc.inflight == 0
            acc.inflight += 1
            meta = {"k": k, "i": i, "j": j}
            if fused:
                self.n_fused += 1
                task = Task(
                    "gemm", p, PRIORITY_COMPUTE,
                    lambda A, B, acc=acc: clr.accumulate(acc.value, clr.block_multiply(A, B), self.eps_lr),
                    (fa, fb), job, dict(meta, kind="compute", fused=True),
                )
                task.result._add_callback(
                    lambda v, acc=acc, p=p, k=k, ra=ra, rb=rb: self._fused_done(acc, v, p, k, ra, rb)
                )
            else:
                self.n_split += 1
                task = Task(
                    "mult", p, PRIORITY_COMPUTE, clr.block_multiply,
                    (fa, fb), job, dict(meta, kind="compute", fused=False),
                )
                task.result._add_callback(
                    lambda v, acc=acc, p=p, k=k, ra=ra, rb=rb: self._split_done(acc, v, p, k, ra, rb)
                )
            count += 1
            grid.submit(task)

        self.remaining[(p, k)] = self.remaining.get((p, k), 0) + count
        if count == 0:
            del self.remaining[(p, k)]
            self._issue_next(p)

    def _panel_future(self, p, local, mailbox, panel, ij, root):
        if root == p:
            return local[(panel, ij)], (p, None)
        epoch = (self.job.id, panel, ij[1] if panel == "A" else ij[0], root)
        tag = (epoch, ij)
        return mailbox.future(tag), (p, tag)

    def _release_ref(self, ref) -> None:
        self.refs[ref] -= 1
        if self.refs[ref] == 0:
            del self.refs[ref]
            p, tag = ref
            if tag is not None:
                self.grid.ranks[p].mailbox.take(tag)
                self.ledger.release(("panel", tag))

    def _set_value(self, acc: _Acc, value: clr.Block) -> None:
        key = ("C", acc.i, acc.j)
        if acc.value is None:
            self.ledger.alloc(acc.rank, key, value.nbytes)
        else:
            self.ledger.resize(key, value.nbytes)
        acc.value = value

    def _fused_done(self, acc, value, p, k, ra, rb) -> None:
        if self.job.error is not None:
            return
        self._release_ref(ra)
        self._release_ref(rb)
        self._set_value(acc, value)
        acc.pos += 1
        acc.inflight -= 1
        self._advance(acc)
        self._retire_one(p, k)

    def _split_done(self, acc, temp, p, k, ra, rb) -> None:
        if self.job.error is not None:
            return
        self._release_ref(ra)
        self._release_ref(rb)
        self.ledger.alloc(acc.rank, ("tmp", acc.i, acc.j, k), temp.nbytes)
        acc.temps[k] = temp
        self._advance(acc)
        self._retire_one(p, k)

    def _advance(self, acc: _Acc) -> None:
        if acc.busy or acc.done:
            return
        if acc.pos < len(acc.ks):
            k = acc.ks[acc.pos]
            temp = acc.temps.pop(k, None)
            if temp is None:
                return
            acc.busy = True
            task = Task(
                "reduce", acc.rank, PRIORITY_RELEASE,
                lambda: clr.accumulate(acc.value, temp, self.eps_lr),
                (), self.job, {"k": k, "i": acc.i, "j": acc.j, "kind": "reduce"},
            )
            task.result._add_callback(lambda v, k=k: self._reduced(acc, k, v))
            self.grid.submit(task)
            return
        acc.done = True
        acc.busy = True
        task = Task(
            "finalize", acc.rank, PRIORITY_RELEASE,
            lambda: self._finalize(acc.value),
            (), self.job, {"i": acc.i, "j": acc.j, "kind": "finalize"},
        )
        task.result._add_callback(lambda v: self._finalized(acc, v))
        self.grid.submit(task)

    def _reduced(self, acc, k, value) -> None:
        if self.job.error is not None:
            return
        self.ledger.release(("tmp", acc.i, acc.j, k))
        self._set_value(acc, value)
        acc.pos += 1
        acc.inflight -= 1
        acc.busy = False
        self._advance(acc)

    def _finalize(self, blk: clr.Block) -> clr.Block:
        blk = clr.finalize(blk, self.eps_lr)
        if not blk.is_empty and clr.exact_norm(blk) <= self.eps_sp * blk.rows * blk.cols:
            return clr.empty(blk.rows, blk.cols)
        return blk

    def _finalized(self, acc, value) -> None:
        if self.job.error is not None:
            return
        self._set_value(acc, value)
        if not value.is_empty:
            self.out_tiles[(acc.i, acc.j)] = value

    # -- completion --------------------------------------------------------

    def wait(self) -> MultiplyReport:
        self.job.wait()
        wall = time.perf_counter() - self.t0
        grid = self.grid
        live = self.ledger.live_keys()
        leaked = [k for k in live if k[0] not in ("A", "B", "C")]
        with grid._cv:
            quiescent = (
                self.job.outstanding == 0
                and not self.remaining
                and not self.refs
                and all(
                    tag[0][0] != self.job.id
                    for r in grid.ranks
                    for tag in list(r.mailbox.payloads) + list(r.mailbox.futures)
                )
            )
        for k in live:
            if k[0] in ("A", "B", "C"):
                self.ledger.release(k)
        result = TiledMatrix(
            self.a.row_tiling, self.b.col_tiling, grid, dict(self.out_tiles), self.eps_lr, self.eps_sp
        )
        trace = [r for r in grid.trace if r.get("job") == self.job.id] if grid.tracing else []
        return MultiplyReport(
            result=result,
            plan=self.plan,
            ledger=self.ledger,
            wall_time=wall,
            n_tasks=self.job.submitted,
            n_fused=self.n_fused,
            n_split=self.n_split,
            leaked=leaked,
            quiescent=quiescent,
            trace=trace,
        )


def multiply_async(
    a: TiledMatrix,
    b: TiledMatrix,
    eps_sp: float = 0.0,
    *,
    issue_depth: int | None = None,
    mode: str = "multiple_issue",
    eps_lr: float | None | str = "auto",
    label: str = "multiply",
) -> PendingMultiply:
    """Start ``A @ B`` on the grid and return immediately.

    Several multiplies may be in flight on one grid at once.  ``eps_lr``
    defaults to the tighter of the operands' thresholds (``None`` = dense).
    """
    return PendingMultiply(a, b, eps_sp, issue_depth, mode, eps_lr, label)


def run_multiply(a, b, eps_sp: float = 0.0, **kwargs) -> MultiplyReport:
    return multiply_async(a, b, eps_sp, **kwargs).wait()


def multiply(a, b, eps_sp: float = 0.0, **kwargs) -> TiledMatrix:
    """``A @ B`` with multiple-issue SUMMA (blocking)."""
    return run_multiply(a, b, eps_sp, **kwargs).result


def multiply_single_issue(a, b, eps_sp: float = 0.0, **kwargs) -> TiledMatrix:
    """``A @ B`` with classic single-issue SUMMA (blocking)."""
    return run_multiply(a, b, eps_sp, mode="single_issue", **kwargs).result


def trace_overlap(trace: list[dict]) -> float:
    """Fraction of compute time that overlaps work of another iteration on
    the same rank: a compute task of a different iteration running at the
    same time, or a message of a later iteration leaving that rank.

    Strictly sequential iterations give 0.
    """
    compute: dict[int, list[dict]] = defaultdict(list)
    messages: dict[int, list[dict]] = defaultdict(list)
    for rec in trace:
        if rec.get("kind") == "compute":
            compute[rec["rank"]].append(rec)
        elif rec.get("kind") == "message" and "k" in rec:
            messages[rec["rank"]].append(rec)
    total = 0.0
    overlapped = 0.0
    for p, recs in compute.items():
        sends = messages.get(p, [])
        for r in recs:
            dur = r["end"] - r["start"]
            total += dur
            if any(o["k"] != r["k"] and o["start"] < r["end"] and r["start"] < o["end"] for o in recs) or any(
                m["k"] > r["k"] and m["start"] < r["end"] and r["start"] < m["end"] for m in sends
            ):
                overlapped += dur
    return overlapped / total if total else 0.0


def iteration_spans(trace: list[dict]) -> dict[int, dict[int, tuple[float, float]]]:
    """Per rank, per iteration: (first compute start, last compute end)."""
    spans: dict[int, dict[int, list[float]]] = defaultdict(dict)
    for rec in trace:
        if rec.get("kind") != "compute":
            continue
        s = spans[rec["rank"]].setdefault(rec["k"], [np.inf, -np.inf])
        s[0] = min(s[0], rec["start"])
        s[1] = max(s[1], rec["end"])
    return {p: {k: tuple(v) for k, v in d.items()} for p, d in spans.items()}
