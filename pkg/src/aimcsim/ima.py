"""In-memory accelerator: crossbar placement and MVM pipeline timing."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .config import CrossbarConfig
from .simkernel import ComponentId, Kernel, SimTime


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class WeightPlacement:
    fragment: str
    used_rows: int
    used_cols: int
    rows: int
    cols: int

    @property
    def utilization(self) -> float:
        return self.used_rows * self.used_cols / (self.rows * self.cols)


@dataclass
class ImaJob:
    num_mvms: int
    in_len: int
    out_len: int
    tag: str = "ima_job"


def phase_times(job: ImaJob, cfg: CrossbarConfig, clock_ghz: float = 1.0) -> tuple[int, int, int]:
    """(stream_in, compute, stream_out) cycles for one MVM."""
    s_in = math.ceil(job.in_len * cfg.element_bytes / cfg.streamer_ports)
    compute = math.ceil(cfg.mvm_latency_ns * clock_ghz)
    s_out = math.ceil(job.out_len * cfg.element_bytes / cfg.streamer_ports)
    return s_in, compute, s_out


def job_cycles(job: ImaJob, cfg: CrossbarConfig, clock_ghz: float = 1.0) -> int:
    """Latency with double-buffered input/output: the slowest phase sets the pace."""
    if job.num_mvms <= 0:
        raise ValueError("IMA job needs num_mvms > 0")
    s_in, comp, s_out = phase_times(job, cfg, clock_ghz)
    return s_in + job.num_mvms * max(s_in, comp, s_out) + s_out


class Ima:
    """Per-cluster accelerator; jobs queue FIFO behind the one computing."""

    def __init__(self, kernel: Kernel, cid: ComponentId, cfg: CrossbarConfig,
                 clock_ghz: float = 1.0):
        self.k = kernel
        self.cid = cid
        self.cfg = cfg
        self.clock_ghz = clock_ghz
        self.placement: WeightPlacement | None = None
        self._queue: deque[tuple[ImaJob, Callable[[], None]]] = deque()
        self.busy = False
        self.mvms = 0
        self.busy_ps = 0
        self.intervals: list[tuple[SimTime, SimTime]] = []

    def place_weights(self, fragment: str, rows: int, cols: int) -> WeightPlacement:
        if self.placement is not None:
            raise PlacementError(f"{self.cid}: weights already placed ({self.placement.fragment})")
        self.placement = place_weights(fragment, rows, cols, self.cfg)
        return self.placement

    def execute(self, job: ImaJob, on_done: Callable[[], None]) -> None:
        if self.placement is None:
            raise PlacementError(f"{self.cid}: execute without a weight placement")
        self._queue.append((job, on_done))
        if not self.busy:
            self._start()

    def _start(self) -> None:
        job, on_done = self._queue.popleft()
        self.busy = True
        dur = self.k.cycles(job_cycles(job, self.cfg, self.clock_ghz))
        start = self.k.now
        self.k.call(self.cid, dur, job.tag, self._finish, job, on_done, start)

    def _finish(self, job: ImaJob, on_done: Callable[[], None], start: SimTime) -> None:
        self.mvms += job.num_mvms
        self.busy_ps += self.k.now - start
        self.intervals.append((start, self.k.now))
        self.busy = False
        if self._queue:
            self._start()
        on_done()


def place_weights(fragment: str, rows: int, cols: int, cfg: CrossbarConfig) -> WeightPlacement:
    if rows <= 0 or cols <= 0:
        raise PlacementError(f"{fragment}: empty fragment {rows}x{cols}")
    if rows > cfg.rows or cols > cfg.cols:
        raise PlacementError(
            f"{fragment}: {rows}x{cols} exceeds the {cfg.rows}x{cfg.cols} crossbar; "
            f"split into {math.ceil(rows / cfg.rows)}x{math.ceil(cols / cfg.cols)} fragments")
    return WeightPlacement(fragment, rows, cols, cfg.rows, cfg.cols)
