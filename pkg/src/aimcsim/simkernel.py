"""Deterministic discrete-event engine.

Time is integer picoseconds. Events with equal fire time are delivered in
global insertion order, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

SimTime = int  # picoseconds


class SimError(RuntimeError):
    """Engine-level failure (livelock guard, bad schedule)."""


class UnknownTarget(KeyError):
    pass


class Kind(str, Enum):
    CLUSTER = "cluster"
    ROUTER = "router"
    HBM = "hbm"
    IMA = "ima"
    DMA = "dma"
    SINK = "sink"


@dataclass(frozen=True, order=True)
class ComponentId:
    kind: Kind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"


@dataclass(order=True)
class Event:
    fire_time: SimTime
    sequence: int
    target: ComponentId = field(compare=False)
    payload: Any = field(compare=False)


@dataclass
class Call:
    """A payload that runs a callback on delivery."""

    tag: str
    fn: Callable[..., Any]
    args: tuple = ()

    def __call__(self) -> Any:
        return self.fn(*self.args)


def payload_tag(payload: Any) -> str:
    tag = getattr(payload, "tag", None)
    return tag if isinstance(tag, str) else type(payload).__name__


def run_call(payload: Any) -> None:
    if not callable(payload):
        raise SimError(f"default handler cannot deliver {payload_tag(payload)}")
    payload()


class Kernel:
    def __init__(self, ps_per_cycle: int = 1000, max_events: int = 50_000_000,
                 trace: bool = False):
        self.ps_per_cycle = ps_per_cycle
        self.max_events = max_events
        self._queue: list[Event] = []
        self._seq = 0
        self._now: SimTime = 0
        self._handlers: dict[ComponentId, Callable[[Any], None]] = {}
        self.delivered = 0
        self._hash = hashlib.sha256()
        self.trace_records: list[tuple[int, int, str, int, str]] | None = [] if trace else None

    # time helpers
    def cycles(self, n: int) -> SimTime:
        return n * self.ps_per_cycle

    def to_cycles(self, t: SimTime) -> float:
        return t / self.ps_per_cycle

    @property
    def now(self) -> SimTime:
        return self._now

    def register(self, cid: ComponentId, handler: Callable[[Any], None] = run_call) -> None:
        if cid in self._handlers:
            raise SimError(f"component {cid} registered twice")
        self._handlers[cid] = handler

    def is_registered(self, cid: ComponentId) -> bool:
        return cid in self._handlers

    def schedule(self, target: ComponentId, delay: SimTime, payload: Any) -> Event:
        if delay < 0:
            raise SimError(f"negative delay {delay}")
        if target not in self._handlers:
            raise UnknownTarget(f"unknown target {target}")
        ev = Event(self._now + delay, self._seq, target, payload)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def call(self, target: ComponentId, delay: SimTime, tag: str,
             fn: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(target, delay, Call(tag, fn, args))

    def call_at(self, target: ComponentId, when: SimTime, tag: str,
                fn: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(target, max(0, when - self._now), Call(tag, fn, args))

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: SimTime | None = None) -> SimTime:
        last = self._now if self.delivered else 0
        q = self._queue
        while q:
            if until is not None and q[0].fire_time > until:
                break
            ev = heapq.heappop(q)
            self._now = ev.fire_time
            self.delivered += 1
            if self.delivered > self.max_events:
                raise SimError(
                    f"livelock guard: more than {self.max_events} events "
                    f"(t={ev.fire_time} ps, target {ev.target})")
            tag = payload_tag(ev.payload)
            self._hash.update(
                f"{ev.fire_time},{ev.sequence},{ev.target},{tag};".encode())
            if self.trace_records is not None:
                self.trace_records.append(
                    (ev.fire_time, ev.sequence, ev.target.kind.value, ev.target.index, tag))
            self._handlers[ev.target](ev.payload)
            last = ev.fire_time
        return last

    def trace_hash(self) -> str:
        return self._hash.copy().hexdigest()

    def dump_trace(self, path: str | Path) -> None:
        if self.trace_records is None:
            raise SimError("tracing was not enabled")
        write_trace(self.trace_records, path)


def write_trace(records: Iterable[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ps", "seq", "target_kind", "target_index", "payload_tag"])
        w.writerows(records)
