"""Self-timed pipeline execution of a mapping plan.

Elaboration turns a plan into stages (one per busy cluster) and a static
list of data pieces. A piece is one producer-tile slice needed by one
consumer tile: its size is the channel intersection times the column
intersection times the rows. Pieces travel in one of three ways:

* push: the producer's DMA-out writes straight into the consumer's L1;
  gated by a credit window on the (producer, consumer) channel;
* store write / pull: residual and input traffic goes through a passive
  store (HBM or a spare cluster's L1) the consumer reads with DMA-in;
* sink: final outputs written to HBM.

A stage computes tile N once every input piece of N is resident, fewer
than ``depth`` finished tiles are still being sent, and its engines are
idle. Each firing first costs ``sync_cycles`` on the master core.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

from .cluster import (ActivityLog, CapacityError, DeadlockError, DigitalJob, Dma, L1Ledger,
                      digital_latency, find_cycle)
from .config import ArchConfig
from .dnn import DnnGraph, LayerSpec, op_count
from .ima import Ima, ImaJob, job_cycles
from .mapper import (MappingPlan, balanced_ranges, fragment_footprint, needs_relu,
                     plan_violations, residual_edges)
from .noc import HBM, Network, TxnKind, build_topology
from .simkernel import ComponentId, Kernel, Kind


class ElaborationError(ValueError):
    pass


PUSH, WRITE, PULL, SINK = "push", "write", "pull", "sink"


@dataclass
class Piece:
    kind: str
    src: int  # producer stage, -1 when read from a store
    dst: int  # consumer stage, -1 when written to a store or the sink
    ptile: int  # producer global tile
    ctile: int  # consumer local tile position (-1 for writes/sink)
    bytes: int
    store: str = ""
    image: int = 0
    arrived: bool = False


@dataclass
class Store:
    """Passive buffer: HBM region or spare-cluster L1 ring with a tile window."""

    name: str
    location: ComponentId
    capacity_tiles: int
    base_addr: int = 0
    tile_bytes: int = 0
    reads_per_tile: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    writes_per_tile: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    written: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    freed_reads: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    live: set[int] = field(default_factory=set)
    high_water: int = 0

    def ready(self, ptile: int) -> bool:
        return self.written[ptile] >= self.writes_per_tile[ptile]

    def addr(self, ptile: int) -> int | None:
        if self.location != HBM:
            return None
        return self.base_addr + (ptile % self.capacity_tiles) * self.tile_bytes


@dataclass
class Channel:
    """Credit window between a producer and a consumer stage."""

    src: int
    dst: int
    depth: int
    span: int
    occupancy: int = 0
    high_water: int = 0

    @property
    def capacity(self) -> int:
        return self.depth + self.span - 1


@dataclass
class FiringRecord:
    stage: int
    cluster: int
    layer: str
    tile: int
    image: int
    ready: int
    sync: tuple[int, int]
    ima: tuple[int, int] | None
    core: tuple[int, int] | None
    dma_in: tuple[int, int] | None = None
    dma_out: tuple[int, int] | None = None

    @property
    def span(self) -> tuple[int, int]:
        ends = [self.sync[1]] + [x[1] for x in (self.ima, self.core, self.dma_out) if x]
        return self.sync[0], max(ends)

    @property
    def wait(self) -> int:
        return self.sync[0] - self.ready


FIRING_FIELDS = ("stage", "cluster", "layer", "tile", "image", "ready_ps", "sync_start_ps",
                 "sync_end_ps", "ima_start_ps", "ima_end_ps", "core_start_ps", "core_end_ps",
                 "dma_in_start_ps", "dma_in_end_ps", "dma_out_start_ps", "dma_out_end_ps")


def write_firings(records: list[FiringRecord], path: str | Path) -> None:
    def pair(x):
        return ("", "") if x is None else x

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FIRING_FIELDS)
        for r in records:
            w.writerow([r.stage, r.cluster, r.layer, r.tile, r.image, r.ready, *r.sync,
                        *pair(r.ima), *pair(r.core), *pair(r.dma_in), *pair(r.dma_out)])


@dataclass
class Stage:
    idx: int
    cluster: int
    layer: str
    role: str  # fragment | reducer | digital | synthetic
    tiles: list[int] = field(default_factory=list)  # global tile ids in order
    images: list[int] = field(default_factory=list)
    ima_jobs: list[ImaJob | None] = field(default_factory=list)
    core_cycles: list[int] = field(default_factory=list)
    core_elems: list[int] = field(default_factory=list)
    inbound: list[list[int]] = field(default_factory=list)  # piece ids per local tile
    outbound: list[list[int]] = field(default_factory=list)
    placement: tuple[int, int] | None = None
    row: int = 0
    part: int = 0
    pos: dict[int, int] = field(default_factory=dict)  # global tile -> local position


@dataclass
class Instance:
    arch: ArchConfig
    stages: list[Stage]
    pieces: list[Piece]
    stores: dict[str, Store]
    channels: dict[tuple[int, int], Channel]
    footprint: dict[int, list[tuple[str, int, str]]]
    num_images: int
    ops_per_image: int = 0
    plan_summary: dict = field(default_factory=dict)
    layer_of_cluster: dict[int, str] = field(default_factory=dict)
    group_of_layer: dict[str, int] = field(default_factory=dict)
    expected_mvms: int = 0
    group_ops: dict[int, int] = field(default_factory=dict)


# ------------------------------------------------------------------ elaboration

@dataclass
class _Unit:
    """A final producer of a layer's output tensor."""

    stage: int
    ch: tuple[int, int]
    replica: int
    replicas: int
    part: int
    parts: int

    def owns(self, g: int) -> bool:
        return g % self.replicas == self.replica


def _part_cols(a: int, b: int, part: int, parts: int) -> tuple[int, int]:
    lo, hi = balanced_ranges(b - a, parts)[part]
    return a + lo, a + hi


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(0, min(a[1], b[1]) - max(a[0], b[0]))


class _Builder:
    def __init__(self, plan: MappingPlan, graph: DnnGraph, arch: ArchConfig, images: int):
        self.plan, self.g, self.arch, self.n = plan, graph, arch, images
        self.stages: list[Stage] = []
        self.pieces: list[Piece] = []
        self.stores: dict[str, Store] = {}
        self.units: dict[str, list[_Unit]] = {}
        self.skip = {add: skip for skip, add, _ in residual_edges(graph)}
        self.cpe = arch.cluster

    def tiles_of(self, lid: str) -> int:
        return self.plan.layers[lid].tile.tiles_per_image

    def cols_of(self, lid: str, g: int) -> tuple[int, int]:
        l = self.g[lid]
        return self.plan.layers[lid].tile.col_range(g % self.tiles_of(lid), l.w_out)

    def core(self, op: str, elems: int) -> int:
        if elems <= 0:
            return 0
        return digital_latency(DigitalJob(op, elems, self.cpe.num_cores), self.cpe)

    def new_stage(self, cluster: int, lid: str, role: str) -> Stage:
        s = Stage(len(self.stages), cluster, lid, role)
        self.stages.append(s)
        return s

    def add_tile(self, s: Stage, g: int, image: int, ima: ImaJob | None, core: int,
                 elems: int = 0) -> None:
        s.pos[g] = len(s.tiles)
        s.tiles.append(g)
        s.images.append(image)
        s.ima_jobs.append(ima)
        s.core_cycles.append(core)
        s.core_elems.append(elems)
        s.inbound.append([])
        s.outbound.append([])

    def piece(self, p: Piece) -> int:
        self.pieces.append(p)
        return len(self.pieces) - 1

    # stages ---------------------------------------------------------------
    def build_stages(self) -> None:
        for l in self.g:
            m = self.plan.layers[l.id]
            T = m.tile.tiles_per_image
            total = T * self.n
            if m.kind == "analog":
                self._analog_stages(l, m, total)
            else:
                self._digital_stages(l, m, total)

    def _analog_stages(self, l: LayerSpec, m, total: int) -> None:
        grid, k = m.grid, m.replication
        relu = needs_relu(l, self.g)
        split = grid.row_splits > 1
        units = []
        for r in range(k):
            for c in range(grid.col_splits):
                cols = grid.col_ranges[c][1] - grid.col_ranges[c][0]
                frag_stages = []
                for i in range(grid.row_splits):
                    s = self.new_stage(m.fragments[r][i][c], l.id, "fragment")
                    rows = grid.dims(i, c)[0]
                    s.placement = (rows, cols)
                    s.row = i
                    for g in range(r, total, k):
                        a, b = self.cols_of(l.id, g)
                        mvms = l.h_out * (b - a)
                        core = self.core("im2col_prep", mvms * rows)
                        if not split and relu:
                            core = max(core, self.core("relu", cols * l.h_out * (b - a)))
                        self.add_tile(s, g, g // self.tiles_of(l.id),
                                      ImaJob(mvms, rows, cols, f"{l.id}"), core)
                    frag_stages.append(s)
                root = frag_stages[0]
                if split:
                    tree = m.trees[r][c]
                    prev = frag_stages
                    for si, stage in enumerate(tree.stages):
                        last = si == tree.depth - 1
                        cur = []
                        for j, inputs in enumerate(stage):
                            s = self.new_stage(tree.reducers[si][j], l.id, "reducer")
                            for g in range(r, total, k):
                                a, b = self.cols_of(l.id, g)
                                e = cols * l.h_out * (b - a)
                                core = self.core("partial_sum_reduce", (len(inputs) - 1) * e) \
                                    if len(inputs) > 1 else 0
                                if last and relu:
                                    core += self.core("relu", e)
                                self.add_tile(s, g, g // self.tiles_of(l.id), None, core,
                                              (len(inputs) - 1) * e)
                            for x in inputs:
                                self._partials(prev[x], s, cols * l.h_out)
                            cur.append(s)
                        prev = cur
                    root = prev[0]
                units.append(_Unit(root.idx, grid.col_ranges[c], r, k, 0, 1))
        self.units[l.id] = units

    def _partials(self, src: Stage, dst: Stage, rows_bytes: int) -> None:
        ps = self.arch.partial_sum_bytes
        for t, g in enumerate(src.tiles):
            a, b = self.cols_of(src.layer, g)
            pid = self.piece(Piece(PUSH, src.idx, dst.idx, g, t, rows_bytes * (b - a) * ps,
                                   image=src.images[t]))
            src.outbound[t].append(pid)
            dst.inbound[t].append(pid)

    def _digital_stages(self, l: LayerSpec, m, total: int) -> None:
        n = m.parallel
        units = []
        for p, cl in enumerate(m.clusters):
            s = self.new_stage(cl, l.id, "digital")
            s.part = p
            for g in range(total):
                a, b = self.cols_of(l.id, g)
                if l.kind == "fully_connected":
                    lo, hi = balanced_ranges(l.c_out, n)[p]
                    e = l.c_in * (hi - lo)
                    core = self.core("fully_connected", e)
                else:
                    pa, pb = _part_cols(a, b, p, n)
                    w = pb - pa
                    if l.kind == "maxpool":
                        e = l.c_out * l.h_out * w
                        core = self.core("maxpool", e)
                    elif l.kind == "avgpool":
                        e = l.c_in * l.h_in * (l.input_cols(pa, pb)[1] - l.input_cols(pa, pb)[0]) if w else 0
                        core = self.core("avgpool", e)
                    else:
                        e = l.c_out * l.h_out * w
                        core = self.core("residual_add", e) + self.core("relu", e)
                self.add_tile(s, g, g // self.tiles_of(l.id), None, core, e)
            ch = balanced_ranges(l.c_out, n)[p] if l.kind == "fully_connected" else (0, l.c_out)
            units.append(_Unit(s.idx, ch, 0, 1, 0 if l.kind == "fully_connected" else p,
                               1 if l.kind == "fully_connected" else n))
        self.units[l.id] = units

    # dataflow -------------------------------------------------------------
    def unit_cols(self, lid: str, u: _Unit, g: int) -> tuple[int, int]:
        a, b = self.cols_of(lid, g)
        return _part_cols(a, b, u.part, u.parts)

    def needs(self, s: Stage, t: int) -> list[tuple[str, tuple[int, int], tuple[int, int]]]:
        """(predecessor, channels, input cols) required by local tile t of stage s."""
        l = self.g[s.layer]
        m = self.plan.layers[s.layer]
        g = s.tiles[t]
        a, b = self.cols_of(s.layer, g)
        if m.kind == "analog":
            ch = m.grid.channels(s.row, l.k_x * l.k_y)
            pred = l.predecessors[0] if l.predecessors else ""
            return [(pred, ch, l.input_cols(a, b))]
        p = s.part
        if l.kind == "fully_connected":
            cols = (0, l.w_in)
        else:
            pa, pb = _part_cols(a, b, p, m.parallel)
            if pb <= pa:
                return []
            cols = l.input_cols(pa, pb)
        return [(pred, (0, l.c_in), cols) for pred in l.predecessors]

    def build_dataflow(self) -> None:
        # stores for residual edges
        for buf in self.plan.residual_buffers:
            loc = HBM if buf.location == "hbm" else ComponentId(Kind.CLUSTER, buf.cluster)
            self.stores[buf.name] = Store(buf.name, loc, buf.capacity_tiles, max(0, buf.hbm_addr),
                                          buf.tile_bytes)
        src = self.g.source
        img_bytes = src.c_in * src.h_in * src.w_in
        self.stores["image"] = Store("image", HBM, 10**9, 0, img_bytes)
        for s in self.stages:
            if s.role == "reducer":
                continue
            for t in range(len(s.tiles)):
                for pred, ch, cols in self.needs(s, t):
                    if not pred:
                        self._image_pull(s, t, ch, cols, img_bytes)
                    elif self.skip.get(s.layer) == pred:
                        self._store_pull(s, t, pred, ch, cols)
                    else:
                        self._push_from(s, t, pred, ch, cols)
        self._store_writes()
        self._sink_writes()

    def _image_pull(self, s: Stage, t: int, ch, cols, img_bytes: int) -> None:
        l = self.g[s.layer]
        nbytes = (ch[1] - ch[0]) * l.h_in * (cols[1] - cols[0])
        st = self.stores["image"]
        image = s.images[t]
        pid = self.piece(Piece(PULL, -1, s.idx, image, t, nbytes, "image", image))
        s.inbound[t].append(pid)
        st.reads_per_tile[image] += 1

    def _producer_tiles(self, pred: str, image: int, cols: tuple[int, int]) -> range:
        T, tw = self.tiles_of(pred), self.plan.layers[pred].tile.tile_w
        lo, hi = cols[0] // tw, (cols[1] - 1) // tw
        return range(image * T + lo, image * T + min(hi, T - 1) + 1)

    def _push_from(self, s: Stage, t: int, pred: str, ch, cols) -> None:
        pl = self.g[pred]
        for u in self.units[pred]:
            cw = _overlap(u.ch, ch)
            if not cw:
                continue
            for g in self._producer_tiles(pred, s.images[t], cols):
                if not u.owns(g):
                    continue
                w = _overlap(self.unit_cols(pred, u, g), cols)
                if not w:
                    continue
                prod = self.stages[u.stage]
                pt = prod.pos[g]
                pid = self.piece(Piece(PUSH, u.stage, s.idx, g, t, cw * pl.h_out * w,
                                       image=s.images[t]))
                prod.outbound[pt].append(pid)
                s.inbound[t].append(pid)

    def _store_pull(self, s: Stage, t: int, pred: str, ch, cols) -> None:
        pl = self.g[pred]
        name = f"res:{pred}->{s.layer}"
        st = self.stores[name]
        for g in self._producer_tiles(pred, s.images[t], cols):
            w = _overlap(self.cols_of(pred, g), cols)
            if not w:
                continue
            pid = self.piece(Piece(PULL, -1, s.idx, g, t, (ch[1] - ch[0]) * pl.h_out * w,
                                   name, s.images[t]))
            s.inbound[t].append(pid)
            st.reads_per_tile[g] += 1

    def _store_writes(self) -> None:
        for skip, add, _ in residual_edges(self.g):
            name = f"res:{skip}->{add}"
            st = self.stores[name]
            pl = self.g[skip]
            for u in self.units[skip]:
                prod = self.stages[u.stage]
                for t, g in enumerate(prod.tiles):
                    a, b = self.unit_cols(skip, u, g)
                    if b <= a:
                        continue
                    pid = self.piece(Piece(WRITE, u.stage, -1, g, -1,
                                           (u.ch[1] - u.ch[0]) * pl.h_out * (b - a), name,
                                           prod.images[t]))
                    prod.outbound[t].append(pid)
                    st.writes_per_tile[g] += 1

    def _sink_writes(self) -> None:
        sink = self.g.sink
        for u in self.units[sink.id]:
            prod = self.stages[u.stage]
            for t, g in enumerate(prod.tiles):
                a, b = self.unit_cols(sink.id, u, g)
                nbytes = (u.ch[1] - u.ch[0]) * sink.h_out * (b - a)
                if nbytes <= 0:
                    continue
                pid = self.piece(Piece(SINK, u.stage, -1, g, -1, nbytes, "sink", prod.images[t]))
                prod.outbound[t].append(pid)

    def channels(self) -> dict[tuple[int, int], Channel]:
        span: dict[tuple[int, int], int] = defaultdict(int)
        for s in self.stages:
            for t, pids in enumerate(s.inbound):
                count: dict[tuple[int, int], int] = defaultdict(int)
                for pid in pids:
                    p = self.pieces[pid]
                    if p.kind == PUSH:
                        count[(p.src, p.dst)] += 1
                for key, v in count.items():
                    span[key] = max(span[key], v)
        return {k: Channel(k[0], k[1], self.arch.channel_depth, v) for k, v in span.items()}


def elaborate(plan: MappingPlan, graph: DnnGraph, arch: ArchConfig,
              images: int | None = None) -> Instance:
    """Build stages, pieces, stores and channels for ``images`` images."""
    if set(plan.layers) != {l.id for l in graph}:
        raise ElaborationError("plan/arch mismatch: plan layers do not match the workload")
    v = plan_violations(plan, graph, arch)
    if plan.total_clusters != arch.num_clusters:
        v.append(f"plan built for {plan.total_clusters} clusters, arch has {arch.num_clusters}")
    if v:
        raise ElaborationError("plan/arch mismatch: " + "; ".join(v))
    n = graph.batch if images is None else images
    if n <= 0:
        raise ElaborationError("need at least one image")
    b = _Builder(plan, graph, arch, n)
    b.build_stages()
    b.build_dataflow()
    for s in b.stages:
        for t, pids in enumerate(s.outbound):
            # send in consumer order so the earliest-needed slice goes first
            pids.sort(key=lambda pid: (b.pieces[pid].ctile, b.pieces[pid].dst, pid))
    groups = {lid: gi for gi, ids in graph.groups().items() for lid in ids}
    mvms = sum(l.h_out * l.w_out * plan.layers[l.id].grid.num_fragments
               for l in graph if l.is_analog) * n
    group_ops: dict[int, int] = defaultdict(int)
    for l in graph:
        group_ops[groups[l.id]] += op_count(l)
    return Instance(arch, b.stages, b.pieces, b.stores, b.channels(),
                    fragment_footprint(plan, graph, arch), n, graph.ops_per_image(),
                    plan.summary(), plan.layer_of_cluster(), groups, expected_mvms=mvms,
                    group_ops=dict(group_ops))


# ------------------------------------------------------------------ execution

@dataclass
class RunResult:
    makespan_ps: int
    image_done_ps: list[int]
    firings: list[FiringRecord]
    activity: dict[int, ActivityLog]
    reserved: dict[int, int]
    tiles_in: dict[int, int]
    tiles_out: dict[int, int]
    mvms: int
    core_cycles: int
    bytes_issued: int
    bytes_delivered: int
    link_bytes_by_level: list[int]
    hbm_bytes: dict[str, int]
    links: list[dict]
    trace_hash: str
    events: int
    channel_high_water: int
    store_high_water: dict[str, int]
    ima_busy_ps: dict[int, int]


class _StageRun:
    __slots__ = ("s", "next", "pull_next", "missing", "ready_at", "computing",
                 "out_q", "out_left", "out_pending", "sending", "pulling", "rec",
                 "blocked_on")

    def __init__(self, s: Stage, pieces: list[Piece]):
        self.s = s
        self.next = 0
        self.pull_next = 0  # next (tile, index) position in the pull order
        self.missing = [len(x) for x in s.inbound]
        self.ready_at = [0] * len(s.tiles)
        self.computing = False
        self.out_q: deque[int] = deque()
        self.out_left = [len(x) for x in s.outbound]
        self.out_pending = 0
        self.sending = False
        self.pulling = False
        self.rec: list[FiringRecord | None] = [None] * len(s.tiles)
        self.blocked_on: tuple | None = None

    @property
    def done(self) -> bool:
        return self.next == len(self.s.tiles) and self.out_pending == 0


def _reset(inst: Instance) -> None:
    """Clear run state so one instance can be simulated repeatedly."""
    for p in inst.pieces:
        p.arrived = False
    for st in inst.stores.values():
        st.written.clear()
        st.freed_reads.clear()
        st.live.clear()
        st.high_water = 0
    for ch in inst.channels.values():
        ch.occupancy = ch.high_water = 0


class Engine:
    def __init__(self, inst: Instance, trace: bool = False):
        self.inst = inst
        arch = inst.arch
        self.arch = arch
        self.k = Kernel(arch.ps_per_cycle, trace=trace)
        self.topo = build_topology(arch.noc, arch.num_clusters)
        self.net = Network(self.k, self.topo)
        self.depth = arch.channel_depth
        self.sync_ps = self.k.cycles(arch.cluster.sync_cycles)
        self.pieces = inst.pieces
        _reset(inst)
        self.ledgers: dict[int, L1Ledger] = {}
        clusters = sorted({s.cluster for s in inst.stages} | set(inst.footprint))
        for c in clusters:
            cid = ComponentId(Kind.CLUSTER, c)
            self.k.register(cid)
            led = L1Ledger(c, arch.cluster.l1_bytes)
            for name, nbytes, purpose in inst.footprint.get(c, []):
                led.reserve(name, nbytes, purpose)
            self.ledgers[c] = led
        self.dma = {c: Dma(self.k, self.net, c, arch.cluster, ComponentId(Kind.DMA, c),
                           self.ledgers) for c in clusters}
        for c in clusters:
            self.k.register(ComponentId(Kind.DMA, c))
        self.ima: dict[int, Ima] = {}
        self.activity = {c: ActivityLog() for c in clusters}
        self.runs = [_StageRun(s, self.pieces) for s in inst.stages]
        for s in inst.stages:
            if s.placement:
                cid = ComponentId(Kind.IMA, s.cluster)
                self.k.register(cid)
                ima = Ima(self.k, cid, arch.crossbar, arch.clock_ghz)
                ima.place_weights(f"{s.layer}@{s.cluster}", *s.placement)
                self.ima[s.cluster] = ima
        # pull order per stage: (tile, piece) in tile order
        self.pull_order: list[list[int]] = []
        for s in inst.stages:
            self.pull_order.append([pid for pids in s.inbound for pid in pids
                                    if self.pieces[pid].kind == PULL])
        self.store_waiters: dict[tuple[str, int], list[int]] = defaultdict(list)
        self.slot_waiters: dict[str, list[int]] = defaultdict(list)
        self.credit_waiters: dict[tuple[int, int], int] = {}
        self.writers: dict[tuple[str, int], set[int]] = defaultdict(set)
        self.readers: dict[str, set[int]] = defaultdict(set)
        for p in self.pieces:
            if p.kind == WRITE:
                self.writers[(p.store, p.ptile)].add(p.src)
            elif p.kind == PULL:
                self.readers[p.store].add(p.dst)
        self.image_left = defaultdict(int)
        for p in self.pieces:
            if p.kind == SINK:
                self.image_left[p.image] += 1
        self.image_done = [0] * inst.num_images
        self.sink_addr = 0
        self.tiles_in: dict[int, int] = defaultdict(int)
        self.tiles_out: dict[int, int] = defaultdict(int)
        self.firings: list[FiringRecord] = []
        self.core_cycles = 0
        self.store_cluster_comm: dict[int, list[tuple[int, int]]] = defaultdict(list)

    # helpers ----------------------------------------------------------------
    def _cid(self, c: int) -> ComponentId:
        return ComponentId(Kind.CLUSTER, c)

    def kick(self, i: int) -> None:
        self._try_pull(i)
        self._try_compute(i)
        self._try_send(i)

    # DMA-in: store reads ----------------------------------------------------
    def _try_pull(self, i: int) -> None:
        r = self.runs[i]
        order = self.pull_order[i]
        if r.pulling or r.pull_next >= len(order):
            return
        pid = order[r.pull_next]
        p = self.pieces[pid]
        if p.ctile >= r.next + self.depth:
            return  # input double buffer full
        st = self.inst.stores[p.store]
        if not st.ready(p.ptile):
            r.blocked_on = ("store", p.store, p.ptile)
            self.store_waiters[(p.store, p.ptile)].append(i)
            return
        r.pulling = True
        r.pull_next += 1
        s = r.s
        addr = st.addr(p.ptile) if p.store != "image" else p.image * st.tile_bytes
        rec_start = self.k.now

        def done(txn, pid=pid, i=i, start=rec_start):
            self._arrive(pid, start)
            self._store_comm(st, start)
            self.runs[i].pulling = False
            self.kick(i)

        self.dma[s.cluster].request("in", st.location, self._cid(s.cluster), p.bytes, done,
                                    dst_buffer="ifm", kind=TxnKind.READ, hbm_addr=addr,
                                    tag=f"pull:{p.store}")

    def _store_comm(self, st: Store, start: int) -> None:
        if st.location != HBM:
            self.store_cluster_comm[st.location.index].append((start, self.k.now))

    def _arrive(self, pid: int, start: int) -> None:
        p = self.pieces[pid]
        p.arrived = True
        r = self.runs[p.dst]
        t = p.ctile
        r.missing[t] -= 1
        if r.missing[t] == 0:
            r.ready_at[t] = self.k.now
        # track inbound transfer window per tile for the firing record
        win = self._in_window.get((p.dst, t))
        self._in_window[(p.dst, t)] = (start, self.k.now) if win is None else (
            min(win[0], start), max(win[1], self.k.now))
        self.kick(p.dst)

    # compute ----------------------------------------------------------------
    def _try_compute(self, i: int) -> None:
        r = self.runs[i]
        s = r.s
        t = r.next
        if r.computing or t >= len(s.tiles) or r.missing[t] or r.out_pending >= self.depth:
            return
        r.computing = True
        self.tiles_in[i] += 1
        now = self.k.now
        sync_end = now + self.sync_ps
        self.activity[s.cluster].sync.append((now, sync_end))
        rec = FiringRecord(i, s.cluster, s.layer, s.tiles[t], s.images[t],
                           max(r.ready_at[t], 0) if s.inbound[t] else now, (now, sync_end),
                           None, None, self._in_window.pop((i, t), None))
        r.rec[t] = rec
        self.k.call(self._cid(s.cluster), self.sync_ps, "fire", self._launch, i, t)

    def _launch(self, i: int, t: int) -> None:
        r = self.runs[i]
        s = r.s
        now = self.k.now
        pending = [0]
        rec = r.rec[t]

        def part_done() -> None:
            pending[0] -= 1
            if pending[0] == 0:
                self._computed(i, t)

        job = s.ima_jobs[t]
        if job is not None:
            pending[0] += 1
            ima = self.ima[s.cluster]

            def ima_done() -> None:
                rec.ima = ima.intervals[-1]
                self.activity[s.cluster].analog.append(ima.intervals[-1])
                part_done()

            ima.execute(job, ima_done)
        core = s.core_cycles[t]
        if core:
            pending[0] += 1
            end = now + self.k.cycles(core)
            rec.core = (now, end)
            self.core_cycles += core
            self.activity[s.cluster].digital.append((now, end))
            self.k.call(self._cid(s.cluster), self.k.cycles(core), "core_done",
                        part_done)
        if pending[0] == 0:
            pending[0] = 1
            part_done()

    def _computed(self, i: int, t: int) -> None:
        r = self.runs[i]
        s = r.s
        r.computing = False
        r.next += 1
        self.firings.append(r.rec[t])
        # release inputs of t
        for pid in s.inbound[t]:
            p = self.pieces[pid]
            if p.kind == PUSH:
                ch = self.inst.channels[(p.src, p.dst)]
                ch.occupancy -= 1
                w = self.credit_waiters.pop((p.src, p.dst), None)
                if w is not None:
                    self.kick(w)
            else:
                st = self.inst.stores[p.store]
                st.freed_reads[p.ptile] += 1
                if p.store != "image" and st.freed_reads[p.ptile] == st.reads_per_tile[p.ptile]:
                    st.live.discard(p.ptile)
                    for w in self.slot_waiters.pop(p.store, []):
                        self.kick(w)
        if s.outbound[t]:
            r.out_pending += 1
            r.out_q.extend(s.outbound[t])
        else:
            self.tiles_out[i] += 1
        self.kick(i)

    # DMA-out ----------------------------------------------------------------
    def _try_send(self, i: int) -> None:
        r = self.runs[i]
        if r.sending or not r.out_q:
            return
        pid = r.out_q[0]
        p = self.pieces[pid]
        s = r.s
        if p.kind == PUSH:
            ch = self.inst.channels[(p.src, p.dst)]
            if ch.occupancy >= ch.capacity:
                r.blocked_on = ("credit", p.dst)
                self.credit_waiters[(p.src, p.dst)] = i
                return
            ch.occupancy += 1
            ch.high_water = max(ch.high_water, ch.occupancy)
            dst, kind, addr, buf = self._cid(self.inst.stages[p.dst].cluster), TxnKind.WRITE, None, "ifm"
        elif p.kind == WRITE:
            st = self.inst.stores[p.store]
            if p.ptile not in st.live:
                if len(st.live) >= st.capacity_tiles:
                    r.blocked_on = ("slot", p.store)
                    self.slot_waiters[p.store].append(i)
                    return
                st.live.add(p.ptile)
                st.high_water = max(st.high_water, len(st.live))
            dst, kind, addr = st.location, TxnKind.WRITE, st.addr(p.ptile)
            buf = None if st.location == HBM else p.store
        else:  # sink
            dst, kind, addr, buf = HBM, TxnKind.WRITE, self.sink_addr, None
            self.sink_addr += p.bytes
        r.out_q.popleft()
        r.sending = True
        r.blocked_on = None
        start = self.k.now
        t = s.pos[p.ptile]
        rec = r.rec[t]

        def done(txn, pid=pid):
            if rec is not None:
                rec.dma_out = (start, self.k.now) if rec.dma_out is None else (
                    rec.dma_out[0], self.k.now)
            if p.kind == PUSH:
                self._arrive(pid, start)
            elif p.kind == WRITE:
                st = self.inst.stores[p.store]
                st.written[p.ptile] += 1
                self._store_comm(st, start)
                if st.ready(p.ptile):
                    for w in self.store_waiters.pop((p.store, p.ptile), []):
                        self.kick(w)
            else:
                self.image_left[p.image] -= 1
                if self.image_left[p.image] == 0:
                    self.image_done[p.image] = self.k.now
            r.out_left[t] -= 1
            if r.out_left[t] == 0:
                r.out_pending -= 1
                self.tiles_out[i] += 1
            r.sending = False
            self.kick(i)

        self.dma[s.cluster].request("out", self._cid(s.cluster), dst, p.bytes, done,
                                    dst_buffer=buf, kind=kind, hbm_addr=addr,
                                    tag=f"{p.kind}:{s.layer}")

    # run --------------------------------------------------------------------
    def run(self) -> RunResult:
        self._in_window: dict[tuple[int, int], tuple[int, int]] = {}
        for i in range(len(self.runs)):
            self.kick(i)
        end = self.k.run()
        unfinished = [r for r in self.runs if not r.done]
        if unfinished:
            self._deadlock(unfinished)
        return self._result(end)

    def _deadlock(self, unfinished: list[_StageRun]) -> None:
        graph: dict[int, set[int]] = defaultdict(set)
        for r in unfinished:
            s = r.s
            c = s.cluster
            t = r.next
            if t < len(s.tiles) and r.missing[t]:
                for pid in s.inbound[t]:
                    p = self.pieces[pid]
                    if p.arrived:
                        continue
                    if p.kind == PUSH:
                        graph[c].add(self.inst.stages[p.src].cluster)
                    else:
                        graph[c] |= {self.inst.stages[w].cluster
                                     for w in self.writers.get((p.store, p.ptile), ())}
            if r.blocked_on and r.blocked_on[0] == "credit":
                graph[c].add(self.inst.stages[r.blocked_on[1]].cluster)
            elif r.blocked_on and r.blocked_on[0] == "slot":
                graph[c] |= {self.inst.stages[d].cluster for d in self.readers[r.blocked_on[1]]}
        graph = {k: v - {k} for k, v in graph.items()}
        cycle = find_cycle(graph)
        blocked = ", ".join(f"cluster{r.s.cluster}({r.s.layer} tile {r.next})"
                            for r in unfinished[:6])
        if cycle:
            msg = "deadlock: wait cycle " + " -> ".join(f"cluster{c}" for c in cycle)
        else:
            msg = f"deadlock: {len(unfinished)} stages blocked"
        raise DeadlockError(f"{msg}; blocked: {blocked}", cycle)

    def _result(self, end: int) -> RunResult:
        for c, log in self.activity.items():
            log.comm.extend(self.dma[c].intervals)
            log.comm.extend(self.store_cluster_comm.get(c, []))
        link_bytes = [0] * self.topo.depth
        for (lvl, *_), b in self.net.link_bytes.items():
            link_bytes[lvl] += b
        reserved = {c: led.bytes_used for c, led in self.ledgers.items()}
        makespan = max([end] + self.image_done)
        return RunResult(
            makespan_ps=makespan, image_done_ps=list(self.image_done), firings=self.firings,
            activity=self.activity, reserved=reserved, tiles_in=dict(self.tiles_in),
            tiles_out=dict(self.tiles_out), mvms=sum(i.mvms for i in self.ima.values()),
            core_cycles=self.core_cycles,
            bytes_issued=sum(self.net.bytes_issued.values()),
            bytes_delivered=sum(self.net.bytes_delivered.values()),
            link_bytes_by_level=link_bytes, hbm_bytes=dict(self.net.hbm_bytes),
            links=self.net.link_report(makespan), trace_hash=self.k.trace_hash(),
            events=self.k.delivered,
            channel_high_water=max((ch.high_water for ch in self.inst.channels.values()),
                                   default=0),
            store_high_water={n: s.high_water for n, s in self.inst.stores.items()},
            ima_busy_ps={c: i.busy_ps for c, i in self.ima.items()})


def simulate(inst: Instance, trace: bool = False) -> RunResult:
    return Engine(inst, trace=trace).run()


def run_batch(inst: Instance, coeffs=None, trace: bool = False, trace_path: str | Path | None = None):
    """Simulate the whole batch and return a SimReport."""
    from .metrics import build_report

    eng = Engine(inst, trace=trace or trace_path is not None)
    res = eng.run()
    if trace_path is not None:
        eng.k.dump_trace(trace_path)
    rep = build_report(inst, res, coeffs=coeffs)
    rep.firings = res.firings  # kept off the JSON; see write_firings
    return rep


def synthetic_pipeline(stage_cycles: list[int], tiles: int, arch: ArchConfig,
                       piece_bytes: int = 64, clusters: list[int] | None = None) -> Instance:
    """Linear chain of digital stages with fixed per-tile compute cycles.

    Stage ``i`` runs on ``clusters[i]`` (default ``i``) and pushes one
    ``piece_bytes`` piece per tile to stage ``i + 1``.
    """
    if not stage_cycles or tiles <= 0:
        raise ElaborationError("need at least one stage and one tile")
    clusters = clusters or list(range(len(stage_cycles)))
    stages, pieces = [], []
    for i, (c, cyc) in enumerate(zip(clusters, stage_cycles)):
        s = Stage(i, c, f"S{i}", "synthetic")
        for t in range(tiles):
            s.pos[t] = t
            s.tiles.append(t)
            s.images.append(0)
            s.ima_jobs.append(None)
            s.core_cycles.append(cyc)
            s.core_elems.append(0)
            s.inbound.append([])
            s.outbound.append([])
        stages.append(s)
    for i in range(len(stages) - 1):
        for t in range(tiles):
            pieces.append(Piece(PUSH, i, i + 1, t, t, piece_bytes))
            stages[i].outbound[t].append(len(pieces) - 1)
            stages[i + 1].inbound[t].append(len(pieces) - 1)
    footprint = {c: [("ifm", arch.channel_depth * piece_bytes, "ifm-tile")] for c in clusters}
    channels = {(i, i + 1): Channel(i, i + 1, arch.channel_depth, 1)
                for i in range(len(stages) - 1)}
    return Instance(arch, stages, pieces, {}, channels, footprint, 1,
                    layer_of_cluster={c: f"S{i}" for i, c in enumerate(clusters)},
                    group_of_layer={f"S{i}": 0 for i in range(len(stages))})
