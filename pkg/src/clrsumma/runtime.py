"""Simulated distributed runtime.

A :class:`ProcessGrid` is a ``pr x pc`` arrangement of ranks living in one
process.  Ranks share nothing except through their mailboxes: a value moves
from one rank to another only via :meth:`ProcessGrid.send` (directly or as
part of :meth:`ProcessGrid.broadcast_tiles`), which goes through a simulated
network with an optional per-message delay.

Work is expressed as :class:`Task` objects with dependency counts.  A task
becomes ready when all of its input futures are resolved; ready tasks of a
rank run on that rank's workers, highest priority first.  Workers never
block on a future, so a task graph can only stall if it contains a cycle or
an input that is never produced; :meth:`Job.wait` reports that as a
:class:`SchedulerError`.
"""

from __future__ import annotations

import heapq
import itertools
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Sequence

# Priority levels; higher runs first among ready tasks of a rank.
PRIORITY_RELEASE = 2  # reductions and anything that frees memory
PRIORITY_COMPUTE = 1
PRIORITY_COMM = 0  # broadcast initiation


class SchedulerError(RuntimeError):
    """The task graph cannot make progress (cycle or missing input)."""


class ProtocolError(RuntimeError):
    """Misuse of the messaging layer, e.g. a reused broadcast tag."""


def default_issue_depth(pr: int, pc: int) -> int:
    """Default number of concurrently scheduled SUMMA iterations."""
    return max(2, min(pr, pc))


def env_worker_cap() -> int:
    raw = os.environ.get("CLR_WORKERS")
    if raw:
        cap = int(raw)
        if cap < 1:
            raise ValueError("CLR_WORKERS must be >= 1")
        return cap
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# futures and tasks


class Future:
    """Single-assignment value slot.  Mutated only under the grid lock."""

    __slots__ = ("done", "value", "_callbacks")

    def __init__(self):
        self.done = False
        self.value: Any = None
        self._callbacks: list[Callable[[Any], None]] = []

    def _set(self, value: Any) -> None:
        if self.done:
            raise ProtocolError("future resolved twice")
        self.done = True
        self.value = value
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(value)

    def _add_callback(self, cb: Callable[[Any], None]) -> None:
        if self.done:
            cb(self.value)
        else:
            self._callbacks.append(cb)


_task_ids = itertools.count()


@dataclass(eq=False)
class Task:
    name: str
    rank: int
    priority: int
    action: Callable[..., Any]
    deps: Sequence[Future] = ()
    job: Job | None = None
    meta: dict = field(default_factory=dict)
    id: int = field(default_factory=lambda: next(_task_ids))
    result: Future = field(default_factory=Future)
    pending: int = 0


class Job:
    """Completion tracker for a group of tasks and messages (one multiply)."""

    _ids = itertools.count()

    def __init__(self, grid: ProcessGrid, label: str = "job"):
        self.id = next(Job._ids)
        self.label = label
        self.grid = grid
        self.outstanding = 0
        self.submitted = 0
        self.error: BaseException | None = None

    def _inc(self) -> None:
        self.outstanding += 1

    def _dec(self) -> None:
        self.outstanding -= 1
        if self.outstanding == 0:
            self.grid._cv.notify_all()

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        self.grid._cv.notify_all()

    def wait(self, timeout: float | None = None) -> None:
        """Block until every task and message of the job has completed."""
        grid = self.grid
        deadline = None if timeout is None else time.monotonic() + timeout
        with grid._cv:
            # outstanding may touch zero while tasks are still being
            # submitted, so only the caller's wait() marks completion
            while not (self.error is not None or self.outstanding == 0):
                if grid._idle():
                    raise SchedulerError(
                        f"{self.label}: {self.outstanding} tasks/messages can never run "
                        "(dependency cycle or missing input)"
                    )
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError(f"{self.label} did not finish in {timeout}s")
                grid._cv.wait(0.05)
        if self.error is not None:
            raise self.error


# --------------------------------------------------------------------------
# memory ledger


class MemoryLedger:
    """Per-rank live-byte accounting with peak tracking."""

    def __init__(self, n_ranks: int):
        self._lock = threading.Lock()
        self.current = [0] * n_ranks
        self.peak = [0] * n_ranks
        self.allocated = 0
        self.released = 0
        self._live: dict[Hashable, tuple[int, int]] = {}

    def alloc(self, rank: int, key: Hashable, nbytes: int) -> None:
        with self._lock:
            if key in self._live:
                raise KeyError(f"ledger key {key!r} already live")
            self._live[key] = (rank, nbytes)
            self.allocated += nbytes
            self._bump(rank, nbytes)

    def resize(self, key: Hashable, nbytes: int) -> None:
        with self._lock:
            rank, old = self._live[key]
            self._live[key] = (rank, nbytes)
            if nbytes > old:
                self.allocated += nbytes - old
            else:
                self.released += old - nbytes
            self._bump(rank, nbytes - old)

    def release(self, key: Hashable) -> None:
        with self._lock:
            rank, nbytes = self._live.pop(key)
            self.released += nbytes
            self._bump(rank, -nbytes)

    def _bump(self, rank: int, delta: int) -> None:
        cur = self.current[rank] + delta
        assert cur >= 0, "ledger went negative"
        self.current[rank] = cur
        if cur > self.peak[rank]:
            self.peak[rank] = cur

    def live_keys(self) -> list[Hashable]:
        with self._lock:
            return list(self._live)

    @property
    def leaked(self) -> int:
        return self.allocated - self.released


# --------------------------------------------------------------------------
# ranks and network


class Mailbox:
    """Received payloads of one rank, keyed by message tag."""

    def __init__(self):
        self.payloads: dict[Hashable, Any] = {}
        self.futures: dict[Hashable, Future] = {}

    def future(self, tag: Hashable) -> Future:
        f = self.futures.get(tag)
        if f is None:
            f = self.futures[tag] = Future()
        return f

    def _deliver(self, tag: Hashable, payload: Any) -> None:
        if tag in self.payloads:
            raise ProtocolError(f"duplicate delivery of {tag!r}")
        self.payloads[tag] = payload
        self.future(tag)._set(payload)

    def take(self, tag: Hashable) -> Any:
        """Consume a delivered message (frees the mailbox slot)."""
        self.futures.pop(tag, None)
        return self.payloads.pop(tag)

    def __len__(self) -> int:
        return len(self.payloads)


@dataclass(eq=False)
class Rank:
    id: int
    row: int
    col: int
    mailbox: Mailbox = field(default_factory=Mailbox)


class _Network(threading.Thread):
    """Delivers messages after a delay.

    Each sender has one outbound link that carries one message at a time,
    so ``delay`` is paid per message, not per batch.
    """

    def __init__(self, grid: ProcessGrid, delay: float, jitter: float, seed: int | None):
        super().__init__(daemon=True, name="clr-network")
        self.grid = grid
        self.delay = delay
        self.jitter = jitter
        self.rng = random.Random(seed)
        self.heap: list[tuple[float, int, Callable[[], None]]] = []
        self.link_free: dict[int, float] = {}
        self.seq = itertools.count()
        self.stopped = False
        self.in_flight = 0

    @property
    def instant(self) -> bool:
        return self.delay == 0.0 and self.jitter == 0.0

    def post(self, src: int, deliver: Callable[[], None]) -> tuple[float, float]:
        """Queue a message; returns its (link start, arrival) times."""
        # caller holds the grid lock
        now = time.perf_counter()
        start = max(now, self.link_free.get(src, 0.0))
        at = start + self.delay
        self.link_free[src] = at
        if self.jitter:
            at += self.rng.uniform(0.0, self.jitter)
        self.in_flight += 1
        heapq.heappush(self.heap, (at, next(self.seq), deliver))
        self.grid._cv.notify_all()
        return start, at

    def run(self) -> None:
        cv = self.grid._cv
        with cv:
            while not self.stopped:
                if not self.heap:
                    cv.wait()
                    continue
                at, _, deliver = self.heap[0]
                now = time.perf_counter()
                if at > now:
                    cv.wait(at - now)
                    continue
                heapq.heappop(self.heap)
                self.in_flight -= 1
                deliver()
                cv.notify_all()


@dataclass
class Broadcast:
    """Handle returned by :meth:`ProcessGrid.broadcast_tiles`."""

    futures: dict[tuple[int, Hashable], Future]
    sends: list[Task]


class ProcessGrid:
    """A ``pr x pc`` grid of simulated ranks sharing one task scheduler."""

    def __init__(
        self,
        pr: int,
        pc: int,
        workers_per_rank: int = 1,
        *,
        max_workers: int | None = None,
        seed: int | None = None,
        net_delay: float = 0.0,
        jitter: float = 0.0,
        trace: bool = False,
    ):
        if pr < 1 or pc < 1 or workers_per_rank < 1:
            raise ValueError("grid dimensions and worker counts must be >= 1")
        self.pr, self.pc = pr, pc
        self.ranks = [Rank(r * pc + c, r, c) for r in range(pr) for c in range(pc)]
        cap = env_worker_cap() if max_workers is None else max_workers
        self.n_workers = max(1, min(self.size * workers_per_rank, cap))
        self.seed = seed
        self._rng = random.Random(seed)
        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)
        self._ready: list[list[tuple]] = [[] for _ in range(self.size)]
        self._n_ready = 0
        self._running = 0
        self._seq = itertools.count()
        self._used_tags: set[Hashable] = set()
        self._stopped = False
        self.tracing = trace
        self.trace: list[dict] = []
        self._t0 = time.perf_counter()
        self.tasks_run = 0

        self._net = _Network(self, net_delay, jitter, seed)
        self._net.start()
        # worker w serves ranks w, w + n_workers, ... when workers < ranks;
        # otherwise each rank gets n_workers // size (+1) workers
        self._workers = []
        for w in range(self.n_workers):
            if self.n_workers >= self.size:
                served = [w % self.size]
            else:
                served = list(range(w, self.size, self.n_workers))
            t = threading.Thread(target=self._worker, args=(served,), daemon=True, name=f"clr-worker-{w}")
            t.start()
            self._workers.append(t)

    # -- topology ---------------------------------------------------------

    @property
    def size(self) -> int:
        return self.pr * self.pc

    @property
    def net_delay(self) -> float:
        return self._net.delay

    def rank_id(self, row: int, col: int) -> int:
        return row * self.pc + col

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.pc)

    def row_group(self, row: int) -> list[int]:
        return [self.rank_id(row, c) for c in range(self.pc)]

    def col_group(self, col: int) -> list[int]:
        return [self.rank_id(r, col) for r in range(self.pr)]

    def owner(self, i: int, j: int) -> int:
        """Block-cyclic owner of tile ``(i, j)``."""
        return self.rank_id(i % self.pr, j % self.pc)

    @property
    def issue_depth(self) -> int:
        return default_issue_depth(self.pr, self.pc)

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        with self._cv:
            self._stopped = True
            self._net.stopped = True
            self._cv.notify_all()
        for t in self._workers:
            t.join(timeout=5)
        self._net.join(timeout=5)

    def __enter__(self) -> ProcessGrid:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"ProcessGrid({self.pr}x{self.pc}, workers={self.n_workers})"

    # -- scheduling -------------------------------------------------------

    def new_job(self, label: str = "job") -> Job:
        return Job(self, label)

    def submit(self, task: Task) -> Task:
        """Register ``task``; it runs once all of ``task.deps`` resolve."""
        with self._cv:
            if task.job is not None:
                task.job._inc()
                task.job.submitted += 1
            deps = list(task.deps)
            task.pending = len(deps) + 1
            for d in deps:
                d._add_callback(lambda _v, t=task: self._dep_done(t))
            self._dep_done(task)
        return task

    def when_all(
        self,
        futures: Iterable[Future],
        continuation: Callable[..., Any],
        priority: int,
        *,
        rank: int,
        job: Job | None = None,
        name: str = "task",
        **meta,
    ) -> Future:
        """Run ``continuation(*values)`` on ``rank`` once all futures resolve."""
        t = Task(name, rank, priority, continuation, tuple(futures), job, meta)
        self.submit(t)
        return t.result

    def _dep_done(self, task: Task) -> None:
        task.pending -= 1
        if task.pending == 0:
            tie = self._rng.random() if self.seed is not None else 0.0
            heapq.heappush(self._ready[task.rank], (-task.priority, tie, next(self._seq), task))
            self._n_ready += 1
            self._cv.notify_all()

    def _idle(self) -> bool:
        return self._n_ready == 0 and self._running == 0 and self._net.in_flight == 0

    def _pick(self, served: list[int]) -> Task | None:
        best = None
        for r in served:
            q = self._ready[r]
            if q and (best is None or q[0] < self._ready[best][0]):
                best = r
        if best is None:
            return None
        self._n_ready -= 1
        return heapq.heappop(self._ready[best])[3]

    def _worker(self, served: list[int]) -> None:
        cv = self._cv
        while True:
            with cv:
                task = self._pick(served)
                while task is None:
                    if self._stopped:
                        return
                    cv.wait()
                    task = self._pick(served)
                self._running += 1
            job = task.job
            value = None
            start = time.perf_counter()
            failed = None
            if job is None or job.error is None:
                try:
                    value = task.action(*[d.value for d in task.deps])
                except BaseException as exc:  # propagated through Job.wait
                    failed = exc
            end = time.perf_counter()
            with cv:
                self._running -= 1
                self.tasks_run += 1
                if self.tracing:
                    rec = {
                        "id": task.id,
                        "name": task.name,
                        "rank": task.rank,
                        "priority": task.priority,
                        "start": start - self._t0,
                        "end": end - self._t0,
                    }
                    if job is not None:
                        rec["job"] = job.id
                    rec.update(task.meta)
                    self.trace.append(rec)
                if failed is not None and job is not None:
                    job._fail(failed)
                else:
                    try:
                        task.result._set(value)
                    except BaseException as exc:
                        if job is None:
                            raise
                        job._fail(exc)
                if job is not None:
                    job._dec()
                cv.notify_all()

    # -- messaging --------------------------------------------------------

    def send(
        self,
        src: int,
        dst: int,
        tag: Hashable,
        payload: Any,
        job: Job | None = None,
        meta: dict | None = None,
    ) -> None:
        """Move ``payload`` from ``src`` to ``dst``'s mailbox under ``tag``.

        When tracing, the message itself is recorded with ``kind="message"``
        and its link start and arrival times.
        """
        mailbox = self.ranks[dst].mailbox
        with self._cv:
            if job is not None:
                job._inc()

            def deliver():
                mailbox._deliver(tag, payload)
                if job is not None:
                    job._dec()

            if self._net.instant:
                start = end = time.perf_counter()
                deliver()
            else:
                start, end = self._net.post(src, deliver)
            if self.tracing:
                rec = {"name": "message", "rank": src, "dst": dst, "start": start - self._t0, "end": end - self._t0}
                if job is not None:
                    rec["job"] = job.id
                rec.update(meta or {})
                rec["kind"] = "message"
                self.trace.append(rec)

    def broadcast_tiles(
        self,
        group: Sequence[int],
        root: int,
        tiles: dict[Hashable, Any],
        epoch_tag: Hashable,
        *,
        job: Job | None = None,
        destinations: dict[Hashable, Iterable[int]] | None = None,
        priority: int = PRIORITY_COMM,
    ) -> Broadcast:
        """Broadcast ``tiles`` from ``root`` to the members of ``group``.

        One send task is created per (tile, non-root destination); every
        destination gets its own future per tile, so consumers can start as
        soon as the tile they need has arrived.  The root's own futures are
        resolved immediately.  Messages are tagged ``(epoch_tag, key)``.
        """
        if root not in group:
            raise ProtocolError(f"root {root} not in group {list(group)}")
        with self._cv:
            if epoch_tag in self._used_tags:
                raise ProtocolError(f"broadcast tag {epoch_tag!r} reused")
            self._used_tags.add(epoch_tag)
        futures: dict[tuple[int, Hashable], Future] = {}
        sends: list[Task] = []
        for key, tile in tiles.items():
            dests = group if destinations is None else destinations.get(key, ())
            for dst in dests:
                if dst not in group:
                    raise ProtocolError(f"destination {dst} outside the broadcast group")
                if dst == root:
                    f = Future()
                    with self._cv:
                        f._set(tile)
                    futures[(dst, key)] = f
                    continue
                tag = (epoch_tag, key)
                with self._cv:
                    futures[(dst, key)] = self.ranks[dst].mailbox.future(tag)

                t = Task("send", root, priority, None, (), job, {"dst": dst})

                def do_send(dst=dst, tag=tag, tile=tile, t=t):
                    self.send(root, dst, tag, tile, job, t.meta)

                t.action = do_send
                sends.append(t)
        for t in sends:
            self.submit(t)
        return Broadcast(futures, sends)

    def mailboxes_empty(self) -> bool:
        with self._cv:
            return all(len(r.mailbox) == 0 and not r.mailbox.futures for r in self.ranks)

    def write_trace(self, path, records: list[dict] | None = None) -> None:
        recs = self.trace if records is None else records
        with open(path, "w", encoding="utf-8") as fh:
            for rec in recs:
                fh.write(json.dumps(rec) + "\n")


def spawn_grid(pr: int, pc: int, workers_per_rank: int = 1, **kwargs) -> ProcessGrid:
    """Create and start a simulated ``pr x pc`` process grid."""
    return ProcessGrid(pr, pc, workers_per_rank, **kwargs)


# --------------------------------------------------------------------------
# memory model


def predict_peak_dense(M, N, K, m, n, k, pr, pc, I) -> float:
    """Per-rank peak element count of multiple-issue SUMMA, dense operands.

    ``m`` and ``n`` (row/column block sizes) do not enter the model and are
    accepted only to mirror the sparse variant's signature.
    """
    return I * (M * k / pr + N * k / pc) + (M * N + M * K + K * N) / (pr * pc)


def predict_peak_sparse(M, N, K, m, n, k, pr, pc, I, z_a, z_b, z_c, avg_pr, avg_pc) -> float:
    """Per-rank peak element count with block sparsity.

    ``z_*`` are the zero fractions of A, B and C; ``avg_pr``/``avg_pc`` are
    the mean numbers of grid rows/columns that receive non-zero panel data
    in one iteration.
    """
    for z in (z_a, z_b, z_c):
        if not 0.0 <= z <= 1.0:
            raise ValueError("zero fractions must lie in [0, 1]")
    if avg_pr > pr or avg_pc > pc:
        raise ValueError("average participating rows/cols exceed the grid")
    replicated = I * (
        (1 - z_a) * (avg_pc / pc) * (M * k / pr) + (1 - z_b) * (avg_pr / pr) * (N * k / pc)
    )
    resident = ((1 - z_c) * M * N + (1 - z_a) * M * K + (1 - z_b) * K * N) / (pr * pc)
    return replicated + resident
