"""One heterogeneous cluster: digital cost model, L1 ledger, DMA, synchronizer."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .config import ClusterConfig, ConfigError
from .noc import CapacityError, Network, Transaction, TxnKind
from .simkernel import ComponentId, Kernel, SimTime

OP_KINDS = ("residual_add", "relu", "maxpool", "avgpool", "partial_sum_reduce",
            "fully_connected", "im2col_prep")
PURPOSES = ("ifm-tile", "ofm-tile", "residual", "scratch")


@dataclass
class DigitalJob:
    op_kind: str
    elements: int
    cores_used: int


def digital_latency(job: DigitalJob, cfg: ClusterConfig) -> int:
    """Cycles for a data-parallel loop spread over ``cores_used`` cores."""
    if job.op_kind not in cfg.cycles_per_element:
        raise ConfigError(f"unknown digital op kind {job.op_kind!r}")
    if job.elements <= 0:
        raise ValueError("digital job needs elements > 0")
    if not 1 <= job.cores_used <= cfg.num_cores:
        raise ValueError(f"cores_used {job.cores_used} outside 1..{cfg.num_cores}")
    work = job.elements * cfg.cycles_per_element[job.op_kind]
    # round to avoid float noise from fractional cpe, then ceil-div exactly
    work_milli = round(work * 1000)
    return -(-work_milli // (1000 * job.cores_used)) + cfg.job_overhead_cycles


@dataclass
class Reservation:
    name: str
    bytes: int
    purpose: str


class L1Ledger:
    def __init__(self, cluster: int, capacity: int):
        self.cluster = cluster
        self.capacity = capacity
        self.reservations: dict[str, Reservation] = {}
        self.bytes_used = 0
        self.high_water = 0

    def reserve(self, name: str, nbytes: int, purpose: str) -> Reservation:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown L1 purpose {purpose!r}")
        if name in self.reservations:
            raise ValueError(f"cluster {self.cluster}: buffer {name!r} already reserved")
        if self.bytes_used + nbytes > self.capacity:
            raise CapacityError(
                f"cluster {self.cluster}: buffer {name!r} needs {nbytes} B but only "
                f"{self.capacity - self.bytes_used} B of L1 are free")
        r = Reservation(name, nbytes, purpose)
        self.reservations[name] = r
        self.bytes_used += nbytes
        self.high_water = max(self.high_water, self.bytes_used)
        return r

    def release(self, name: str) -> None:
        r = self.reservations.pop(name)
        self.bytes_used -= r.bytes

    @property
    def free(self) -> int:
        return self.capacity - self.bytes_used


class Signal:
    """One-shot event a synchronizer can wait on."""

    def __init__(self, name: str, owner: int | None = None):
        self.name = name
        self.owner = owner  # cluster expected to fire it
        self.fired_at: SimTime | None = None
        self._waiters: list[Callable[[], None]] = []

    @property
    def fired(self) -> bool:
        return self.fired_at is not None

    def fire(self, now: SimTime) -> None:
        if self.fired:
            return
        self.fired_at = now
        waiters, self._waiters = self._waiters, []
        for w in waiters:
            w()

    def on_fire(self, fn: Callable[[], None]) -> None:
        if self.fired:
            fn()
        else:
            self._waiters.append(fn)


class DeadlockError(RuntimeError):
    def __init__(self, message: str, cycle: list[int] | None = None):
        super().__init__(message)
        self.cycle = cycle or []


class Synchronizer:
    """Hardware event unit: wakes the master core once all signals fired."""

    def __init__(self, kernel: Kernel, cluster: int):
        self.k = kernel
        self.cluster = cluster
        self.waiting: list[Signal] = []
        self.sleep_ps = 0

    def wait(self, signals: Iterable[Signal], on_wake: Callable[[], None]) -> None:
        sigs = list(signals)
        if not sigs:
            raise ValueError("synchronizer_wait needs a non-empty event set")
        start = self.k.now
        pending = [s for s in sigs if not s.fired]
        if not pending:
            on_wake()
            return
        self.waiting.extend(pending)
        remaining = [len(pending)]

        def one_done() -> None:
            remaining[0] -= 1
            if remaining[0] == 0:
                for s in pending:
                    self.waiting.remove(s)
                self.sleep_ps += self.k.now - start
                on_wake()

        for s in pending:
            s.on_fire(one_done)


def find_cycle(graph: dict[int, set[int]]) -> list[int]:
    """First cycle (closed, e.g. [a, b, a]) in a wait-for graph, or []."""
    color: dict[int, int] = {}
    stack: list[int] = []

    def dfs(u: int) -> list[int]:
        color[u] = 1
        stack.append(u)
        for v in sorted(graph.get(u, ())):
            if color.get(v, 0) == 1:
                return stack[stack.index(v):] + [v]
            if color.get(v, 0) == 0 and v in graph:
                found = dfs(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return []

    for u in sorted(graph):
        if color.get(u, 0) == 0:
            found = dfs(u)
            if found:
                return found
    return []


def find_wait_cycle(syncs: Iterable[Synchronizer]) -> list[int]:
    """Cycle in the cluster wait-for graph, or [] if none."""
    graph = {s.cluster: {sig.owner for sig in s.waiting if sig.owner is not None}
             for s in syncs if s.waiting}
    return find_cycle(graph)


def check_deadlock(kernel: Kernel, syncs: list[Synchronizer], idle_threshold_ps: int = 0) -> None:
    """Raise DeadlockError if waits remain with nothing left to fire them.

    Called when the event queue is drained or time has not advanced for
    ``idle_threshold_ps``.
    """
    blocked = [s for s in syncs if s.waiting]
    if not blocked or (kernel.pending() and idle_threshold_ps == 0):
        return
    cycle = find_wait_cycle(blocked)
    if cycle:
        msg = "deadlock: wait cycle " + " -> ".join(f"cluster{c}" for c in cycle)
    else:
        names = ", ".join(f"cluster{s.cluster} on {s.waiting[0].name}" for s in blocked[:5])
        msg = f"deadlock: {len(blocked)} clusters blocked ({names})"
    raise DeadlockError(msg, cycle)


@dataclass
class _DmaReq:
    txn: Transaction
    on_done: Callable[[Transaction], None]


class Dma:
    """Two independent channels (``in`` and ``out``), each serving one
    transfer at a time in FIFO order."""

    def __init__(self, kernel: Kernel, net: Network, cluster: int, cfg: ClusterConfig,
                 cid: ComponentId, ledgers: dict[int, L1Ledger] | None = None):
        self.k = kernel
        self.net = net
        self.cluster = cluster
        self.cfg = cfg
        self.cid = cid
        self.ledgers = ledgers or {}
        self._queues = {"in": deque(), "out": deque()}
        self._busy = {"in": False, "out": False}
        self.bytes = {"in": 0, "out": 0}
        self.intervals: list[tuple[SimTime, SimTime]] = []
        self._started: dict[str, SimTime] = {}

    def request(self, channel: str, src: ComponentId, dst: ComponentId, nbytes: int,
                on_done: Callable[[Transaction], None], dst_buffer: str | None = None,
                kind: TxnKind = TxnKind.WRITE, hbm_addr: int | None = None,
                tag: str = "dma") -> None:
        if nbytes <= 0:
            raise ValueError("DMA request needs bytes > 0")
        if dst_buffer is not None and dst.index in self.ledgers and dst.kind.value == "cluster":
            ledger = self.ledgers[dst.index]
            res = ledger.reservations.get(dst_buffer)
            if res is None or nbytes > res.bytes:
                have = 0 if res is None else res.bytes
                raise CapacityError(
                    f"cluster {dst.index}: inbound {nbytes} B overflows buffer "
                    f"{dst_buffer!r} ({have} B reserved)")
        txn = Transaction(src, dst, nbytes, kind=kind, hbm_addr=hbm_addr, tag=tag)
        self._queues[channel].append(_DmaReq(txn, on_done))
        if not self._busy[channel]:
            self._next(channel)

    def _next(self, channel: str) -> None:
        q = self._queues[channel]
        if not q:
            self._busy[channel] = False
            return
        self._busy[channel] = True
        req = q.popleft()
        self._started[channel] = self.k.now
        self.k.call(self.cid, self.k.cycles(self.cfg.dma_setup_cycles), "dma_issue",
                    self.net.issue, req.txn, lambda t, r=req, ch=channel: self._finish(ch, r, t))

    def _finish(self, channel: str, req: _DmaReq, txn: Transaction) -> None:
        self.bytes[channel] += txn.bytes
        self.intervals.append((self._started[channel], self.k.now))
        self._next(channel)
        req.on_done(txn)

    def idle(self) -> bool:
        return not (self._busy["in"] or self._busy["out"])


BUCKETS = ("compute_analog", "compute_digital", "synchronization", "communication", "sleep")


@dataclass
class ActivityLog:
    """Per-cluster busy intervals; partitions the active window exactly."""

    analog: list[tuple[int, int]] = field(default_factory=list)
    digital: list[tuple[int, int]] = field(default_factory=list)
    sync: list[tuple[int, int]] = field(default_factory=list)
    comm: list[tuple[int, int]] = field(default_factory=list)

    def window(self) -> tuple[int, int] | None:
        allv = self.analog + self.digital + self.sync + self.comm
        if not allv:
            return None
        return min(a for a, _ in allv), max(b for _, b in allv)

    def buckets(self) -> dict[str, int]:
        """Time per bucket with priority analog > digital > sync > comm > sleep."""
        win = self.window()
        out = dict.fromkeys(BUCKETS, 0)
        if win is None:
            return out
        layers = [self.analog, self.digital, self.sync, self.comm]
        points = {win[0], win[1]}
        for lst in layers:
            for a, b in lst:
                points.add(a)
                points.add(b)
        pts = sorted(points)
        idx = {p: i for i, p in enumerate(pts)}
        n = len(pts) - 1
        owner = [4] * n  # default sleep
        for prio in range(3, -1, -1):
            diff = [0] * (n + 1)
            for a, b in layers[prio]:
                if b > a:
                    diff[idx[a]] += 1
                    diff[idx[b]] -= 1
            run = 0
            for i in range(n):
                run += diff[i]
                if run > 0:
                    owner[i] = prio
        for i in range(n):
            out[BUCKETS[owner[i]]] += pts[i + 1] - pts[i]
        return out


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def scale_elements(elements: float) -> int:
    return max(1, math.ceil(elements))
