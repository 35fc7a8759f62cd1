"""Static mapping of a DNN graph onto clusters.

A plan records, per layer, its crossbar partitioning, replication (analog)
or parallelization (digital) factor, the per-column-split reduction trees
and the tile plan. Cluster ids are assigned by a deterministic layout in
DAG order, so one layer's fragments and reducers sit on consecutive
leaves of the quadrant tree.
"""

from __future__ import annotations

import copy
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cluster import DigitalJob, digital_latency
from .config import ArchConfig, CrossbarConfig
from .dnn import DnnGraph, LayerSpec, TilePlan, TilingError, _tile_bytes, plan_tiles
from .ima import ImaJob, job_cycles

SCHEMA_VERSION = 1
POLICIES = ("hbm", "spare_l1")
PRESETS = ("naive", "replicated", "final")


class MappingError(ValueError):
    pass


def balanced_ranges(n: int, k: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, k)
    out, lo = [], 0
    for i in range(k):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class FragmentGrid:
    layer: str
    rows: int
    cols: int
    row_splits: int
    col_splits: int
    row_ranges: list[tuple[int, int]]
    col_ranges: list[tuple[int, int]]

    @property
    def num_fragments(self) -> int:
        return self.row_splits * self.col_splits

    def dims(self, i: int, c: int) -> tuple[int, int]:
        r0, r1 = self.row_ranges[i]
        c0, c1 = self.col_ranges[c]
        return r1 - r0, c1 - c0

    def cells(self) -> int:
        return sum(self.dims(i, c)[0] * self.dims(i, c)[1]
                   for i in range(self.row_splits) for c in range(self.col_splits))

    def channels(self, i: int, kernel_area: int) -> tuple[int, int]:
        """Input channels touched by row split ``i`` (rows are channel-major)."""
        r0, r1 = self.row_ranges[i]
        return r0 // kernel_area, (r1 - 1) // kernel_area + 1


def partition_layer(l: LayerSpec, cb: CrossbarConfig) -> FragmentGrid:
    if l.kind != "conv2d":
        raise MappingError(f"{l.id}: only conv layers are mapped onto crossbars")
    rows, cols = l.weight_rows, l.c_out
    rs, cs = math.ceil(rows / cb.rows), math.ceil(cols / cb.cols)
    return FragmentGrid(l.id, rows, cols, rs, cs, balanced_ranges(rows, rs),
                        balanced_ranges(cols, cs))


@dataclass
class ReductionTree:
    """Staged sum of ``producers`` partials.

    ``stages[s][j]`` lists the indices (into the previous level, level 0
    being the producers) summed by reducer ``j`` of stage ``s``.
    ``reducers[s][j]`` is its cluster id once laid out (-1 before).
    """

    producers: list[int]
    stages: list[list[list[int]]]
    reducers: list[list[int]] = field(default_factory=list)

    @property
    def widths(self) -> list[int]:
        return [len(s) for s in self.stages]

    @property
    def fan_ins(self) -> list[int]:
        return [max(len(x) for x in s) for s in self.stages]

    @property
    def num_reducers(self) -> int:
        return sum(self.widths)

    @property
    def depth(self) -> int:
        return len(self.stages)


def plan_reduction(row_splits: int, fan_in: int, layer: str = "",
                   producers: list[int] | None = None,
                   free_pool: list[int] | None = None) -> ReductionTree:
    if row_splits < 2 or fan_in < 2:
        raise MappingError(f"{layer}: reduction needs >= 2 producers and fan_in >= 2")
    widths = []
    s = 1
    while True:
        w = math.ceil(row_splits / fan_in ** s)
        widths.append(w)
        if w == 1:
            break
        s += 1
    stages = []
    prev = row_splits
    for w in widths:
        stages.append([list(range(a, b)) for a, b in balanced_ranges(prev, w)])
        prev = w
    tree = ReductionTree(list(producers) if producers else [-1] * row_splits, stages,
                         [[-1] * w for w in widths])
    if free_pool is not None:
        need = tree.num_reducers
        if len(free_pool) < need:
            raise MappingError(
                f"{layer}: reduction needs {need} free clusters, {len(free_pool)} available")
        it = iter(free_pool[:need])
        tree.reducers = [[next(it) for _ in range(w)] for w in widths]
    return tree


def reduction_fan_in(cols_out: int, arch: ArchConfig) -> int:
    """Largest fan-in whose partial-sum ingest keeps pace with one MVM per pixel."""
    width = min(arch.noc.data_width_bytes)
    per_input = cols_out * arch.partial_sum_bytes
    return max(2, (arch.mvm_cycles * width) // per_input)


@dataclass
class ResidualBuffer:
    src: str
    dst: str
    tile_bytes: int
    capacity_tiles: int
    min_bytes: int
    location: str  # "hbm" or "cluster"
    cluster: int = -1
    hbm_addr: int = -1

    @property
    def bytes(self) -> int:
        return self.tile_bytes * self.capacity_tiles

    @property
    def name(self) -> str:
        return f"res:{self.src}->{self.dst}"


@dataclass
class LayerMapping:
    layer: str
    kind: str  # analog | digital
    tile: TilePlan
    replication: int = 1
    parallel: int = 1
    grid: FragmentGrid | None = None
    fan_in: int = 2
    # laid out: per replica, fragments[row][col] and one tree per col split
    fragments: list[list[list[int]]] = field(default_factory=list)
    trees: list[list[ReductionTree]] = field(default_factory=list)
    clusters: list[int] = field(default_factory=list)

    @property
    def row_splits(self) -> int:
        return self.grid.row_splits if self.grid else 1

    @property
    def col_splits(self) -> int:
        return self.grid.col_splits if self.grid else 1

    def template_tree(self) -> ReductionTree | None:
        if self.kind != "analog" or self.row_splits < 2:
            return None
        return plan_reduction(self.row_splits, self.fan_in, self.layer)

    def clusters_per_replica(self) -> int:
        if self.kind == "digital":
            return self.parallel
        t = self.template_tree()
        return self.grid.num_fragments + (t.num_reducers * self.col_splits if t else 0)

    @property
    def num_clusters(self) -> int:
        if self.kind == "digital":
            return self.parallel
        return self.replication * self.clusters_per_replica()

    @property
    def weight_clusters(self) -> int:
        return self.replication * self.grid.num_fragments if self.grid else 0


@dataclass
class MappingPlan:
    preset: str
    total_clusters: int
    layers: dict[str, LayerMapping]
    residual_policy: str = "hbm"
    residual_buffers: list[ResidualBuffer] = field(default_factory=list)
    spare_clusters: list[int] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def clusters_used(self) -> int:
        return sum(m.num_clusters for m in self.layers.values()) + len(self.spare_clusters)

    @property
    def weight_clusters(self) -> int:
        return sum(m.weight_clusters for m in self.layers.values())

    def replication_map(self) -> dict[str, int]:
        return {k: m.replication for k, m in self.layers.items() if m.kind == "analog"}

    def parallel_map(self) -> dict[str, int]:
        return {k: m.parallel for k, m in self.layers.items() if m.kind == "digital"}

    def layer_of_cluster(self) -> dict[int, str]:
        out = {}
        for lid, m in self.layers.items():
            for c in m.clusters:
                out[c] = lid
        for c in self.spare_clusters:
            out[c] = "residual"
        return out

    def summary(self) -> dict:
        return {
            "preset": self.preset,
            "clusters_used": self.clusters_used,
            "total_clusters": self.total_clusters,
            "weight_clusters": self.weight_clusters,
            "spare_clusters": len(self.spare_clusters),
            "residual_policy": self.residual_policy,
            "residual_bytes": sum(b.bytes for b in self.residual_buffers),
            "residual_min_bytes": sum(b.min_bytes for b in self.residual_buffers),
            "replication": {k: v for k, v in self.replication_map().items() if v > 1},
            "parallel": {k: v for k, v in self.parallel_map().items() if v > 1},
        }

    # serialization
    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self),
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "MappingPlan":
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise MappingError("unsupported plan schema_version")
        layers = {}
        for lid, m in d["layers"].items():
            grid = m.get("grid")
            layers[lid] = LayerMapping(
                layer=m["layer"], kind=m["kind"], tile=TilePlan(**m["tile"]),
                replication=m["replication"], parallel=m["parallel"],
                grid=FragmentGrid(**{**grid,
                                     "row_ranges": [tuple(x) for x in grid["row_ranges"]],
                                     "col_ranges": [tuple(x) for x in grid["col_ranges"]]})
                if grid else None,
                fan_in=m["fan_in"], fragments=m["fragments"],
                trees=[[ReductionTree(**t) for t in rep] for rep in m["trees"]],
                clusters=m["clusters"])
        return cls(d["preset"], d["total_clusters"], layers, d["residual_policy"],
                   [ResidualBuffer(**b) for b in d["residual_buffers"]],
                   d["spare_clusters"], d.get("notes", {}))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MappingPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- planning

def needs_relu(l: LayerSpec, graph: DnnGraph) -> bool:
    """Convs apply ReLU unless an add follows; adds always do."""
    if l.kind == "residual_add":
        return True
    if l.kind == "conv2d":
        return all(graph[s].kind != "residual_add" for s in graph.successors(l.id))
    return False


def _analog_tile(l: LayerSpec, grid: FragmentGrid, fan_in: int,
                 arch: ArchConfig) -> TilePlan:
    """Largest tile that fits every role of the layer (fragment and reducer)."""
    budget = arch.cluster.l1_bytes
    ka = l.k_x * l.k_y
    ch = max(grid.channels(i, ka)[1] - grid.channels(i, ka)[0] for i in range(grid.row_splits))
    cols = max(b - a for a, b in grid.col_ranges)
    split = grid.row_splits > 1
    ps = arch.partial_sum_bytes
    f = min(fan_in, grid.row_splits)
    best = 0
    for tw in range(l.w_out, 0, -1):
        ifm_cols = (tw - 1) * l.stride + l.k_x
        frag = 2 * ch * l.h_in * ifm_cols + 2 * cols * l.h_out * tw * (ps if split else 1)
        red = 0
        if split:
            red = 2 * f * cols * l.h_out * tw * ps + 2 * cols * l.h_out * tw * ps
        if max(frag, red) <= budget:
            best = tw
            break
    if best == 0:
        raise TilingError(f"layer {l.id}: no tile width fits {budget} B of L1")
    ifm, ofm = _tile_bytes(l, best, 1, 1)
    return TilePlan(l.id, best, -(-l.w_out // best), ifm, ofm, max(0, l.k_x - l.stride))


def _new_layer_mapping(l: LayerSpec, arch: ArchConfig) -> LayerMapping:
    if l.is_analog:
        grid = partition_layer(l, arch.crossbar)
        fan = reduction_fan_in(max(b - a for a, b in grid.col_ranges), arch)
        return LayerMapping(l.id, "analog", _analog_tile(l, grid, fan, arch), grid=grid,
                            fan_in=fan)
    return LayerMapping(l.id, "digital", plan_tiles(l, arch.cluster.l1_bytes))


def layout(plan: MappingPlan, graph: DnnGraph) -> MappingPlan:
    """Assign cluster ids sequentially in DAG order (in place)."""
    nxt = [0]

    def take() -> int:
        nxt[0] += 1
        return nxt[0] - 1

    spare_after: dict[str, list[ResidualBuffer]] = {}
    for b in plan.residual_buffers:
        if b.location == "cluster":
            spare_after.setdefault(b.src, []).append(b)
    plan.spare_clusters = []
    current_spare, spare_free = -1, 0
    cap = plan.notes.get("l1_bytes", 2**20)
    for l in graph:
        m = plan.layers[l.id]
        m.clusters, m.fragments, m.trees = [], [], []
        if m.kind == "digital":
            m.clusters = [take() for _ in range(m.parallel)]
        else:
            tmpl = m.template_tree()
            for _ in range(m.replication):
                frags = [[-1] * m.col_splits for _ in range(m.row_splits)]
                trees = []
                for c in range(m.col_splits):
                    for i in range(m.row_splits):
                        frags[i][c] = take()
                        m.clusters.append(frags[i][c])
                    if tmpl:
                        t = copy.deepcopy(tmpl)
                        t.producers = [frags[i][c] for i in range(m.row_splits)]
                        t.reducers = [[take() for _ in st] for st in t.stages]
                        m.clusters += [x for st in t.reducers for x in st]
                        trees.append(t)
                m.fragments.append(frags)
                m.trees.append(trees)
        # residual buffers sourced here go onto spare clusters right after it
        for b in spare_after.get(l.id, []):
            if current_spare < 0 or spare_free < b.bytes:
                current_spare, spare_free = take(), cap
                plan.spare_clusters.append(current_spare)
            b.cluster = current_spare
            spare_free -= b.bytes
    if nxt[0] > plan.total_clusters:
        raise MappingError(
            f"plan needs {nxt[0]} clusters, architecture has {plan.total_clusters}")
    return plan


def naive_plan(graph: DnnGraph, arch: ArchConfig) -> MappingPlan:
    """Every layer mapped once, residuals in HBM, no balancing."""
    graph.validate()
    arch.validate()
    layers = {l.id: _new_layer_mapping(l, arch) for l in graph}
    plan = MappingPlan("naive", arch.num_clusters, layers,
                       notes={"l1_bytes": arch.cluster.l1_bytes})
    place_residuals(plan, graph, arch, "hbm")
    return plan


def apply_replication(plan: MappingPlan, graph: DnnGraph, layer: str, factor: int) -> MappingPlan:
    m = plan.layers[layer]
    if m.kind != "analog":
        raise MappingError(f"{layer}: only analog layers are replicated")
    if factor < 1:
        raise MappingError("replication factor must be >= 1")
    new = copy.deepcopy(plan)
    new.layers[layer].replication = factor
    return layout(new, graph)


def assign_parallel_clusters(plan: MappingPlan, graph: DnnGraph, layer: str, n: int) -> MappingPlan:
    m = plan.layers[layer]
    if m.kind != "digital":
        raise MappingError(f"{layer}: only digital layers are parallelized")
    if not 1 <= n <= max_parallel(graph[layer], m):
        raise MappingError(f"{layer}: parallel factor {n} outside 1..{max_parallel(graph[layer], m)}")
    new = copy.deepcopy(plan)
    new.layers[layer].parallel = n
    return layout(new, graph)


def max_parallel(l: LayerSpec, m: LayerMapping) -> int:
    """Each parallel cluster takes a column slice; fc splits its output neurons."""
    if l.kind == "fully_connected":
        return min(64, l.c_out)
    return m.tile.tile_w


# ---------------------------------------------------------------- residuals

def depth_map(graph: DnnGraph) -> dict[str, int]:
    d: dict[str, int] = {}
    for l in graph:
        d[l.id] = 1 + max((d[p] for p in l.predecessors), default=-1)
    return d


def residual_edges(graph: DnnGraph) -> list[tuple[str, str, str]]:
    """(skip source, add, main predecessor) for each residual add."""
    d = depth_map(graph)
    out = []
    for l in graph:
        if l.kind == "residual_add":
            a, b = l.predecessors
            skip, main = (a, b) if d[a] < d[b] else (b, a)
            out.append((skip, l.id, main))
    return out


def _ancestors(graph: DnnGraph, lid: str) -> set[str]:
    seen, stack = set(), [lid]
    while stack:
        x = stack.pop()
        for p in graph[x].predecessors:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _pipeline_levels(m: LayerMapping) -> int:
    t = m.template_tree()
    return 1 + (t.depth if t else 0)


def residual_envelope(graph: DnnGraph, plan: MappingPlan, skip: str, add: str,
                      main: str, depth: int) -> tuple[int, int, int]:
    """(tile_bytes, capacity_tiles, min_bytes) for one skip edge.

    The skip tensor must be held while the main branch fills: every level
    of the branch (including reduction stages) and the add itself keep up
    to ``depth`` tiles in flight.
    """
    src = graph[skip]
    common = _ancestors(graph, skip) | {skip}
    branch = [x for x in (_ancestors(graph, main) | {main}) if x not in common]
    in_flight = 0.0
    for x in branch:
        m = plan.layers[x]
        scale = src.w_out / graph[x].w_out
        in_flight += depth * _pipeline_levels(m) * m.tile.tile_w * scale
    # the add holds the tile it is consuming
    in_flight += plan.layers[add].tile.tile_w * src.w_out / graph[add].w_out
    in_flight_cols = math.ceil(in_flight)
    tw = plan.layers[skip].tile.tile_w
    tile_bytes = src.c_out * src.h_out * tw
    cap_tiles = math.ceil(in_flight_cols / tw) + 1
    return tile_bytes, cap_tiles, src.c_out * src.h_out * in_flight_cols


def place_residuals(plan: MappingPlan, graph: DnnGraph, arch: ArchConfig,
                    policy: str) -> MappingPlan:
    """Attach residual buffers (in place) and re-layout."""
    if policy not in POLICIES:
        raise MappingError(f"unknown residual policy {policy!r}; expected one of {POLICIES}")
    plan.residual_policy = policy
    plan.residual_buffers = []
    images = graph.batch * graph.source.c_in * graph.image_h * graph.image_w
    addr = images + graph.batch * graph.sink.c_out  # after inputs and outputs
    for skip, add, main in residual_edges(graph):
        tile_bytes, cap, min_bytes = residual_envelope(graph, plan, skip, add, main,
                                                       arch.channel_depth)
        if policy == "spare_l1":
            if tile_bytes * cap > arch.cluster.l1_bytes:
                raise MappingError(
                    f"residual {skip}->{add}: {tile_bytes * cap} B exceeds one cluster's L1")
            plan.residual_buffers.append(
                ResidualBuffer(skip, add, tile_bytes, cap, min_bytes, "cluster"))
        else:
            # HBM holds the whole batch; the ring never wraps
            tiles = plan.layers[skip].tile.tiles_per_image * graph.batch
            b = ResidualBuffer(skip, add, tile_bytes, max(cap, tiles), min_bytes, "hbm",
                               hbm_addr=addr)
            addr += b.bytes
            plan.residual_buffers.append(b)
    if addr > arch.noc.hbm_size_bytes:
        raise MappingError(f"HBM footprint {addr} B exceeds {arch.noc.hbm_size_bytes} B")
    return layout(plan, graph)


# ---------------------------------------------------------------- estimates

_HOPS_EST = 16  # typical on-chip path latency, cycles


def _xfer(nbytes: float, arch: ArchConfig, hbm: bool = False) -> float:
    if nbytes <= 0:
        return 0.0
    lat = _HOPS_EST + (arch.noc.hop_latency_cycles[0] if hbm else 0)
    return arch.cluster.dma_setup_cycles + lat + math.ceil(nbytes / min(arch.noc.data_width_bytes))


def _skip_of(graph: DnnGraph) -> dict[str, str]:
    return {add: skip for skip, add, _ in residual_edges(graph)}


def _copy_factor(graph: DnnGraph, plan: MappingPlan, lid: str) -> float:
    """Copies of one output byte sent to consumers (or a residual store)."""
    skips = _skip_of(graph)
    total = 0.0
    for s in graph.successors(lid):
        sl, sm = graph[s], plan.layers[s]
        if skips.get(s) == lid:
            total += 1.0
        elif sm.kind == "analog":
            ka = sl.k_x * sl.k_y
            chans = sum(b - a for a, b in (sm.grid.channels(i, ka) for i in range(sm.row_splits)))
            total += sm.col_splits * chans / sl.c_in
        else:
            total += 1.0
    return total if total else 1.0


def estimate_layer(graph: DnnGraph, plan: MappingPlan, arch: ArchConfig, lid: str) -> float:
    """Steady-state cycles per image of the slowest cluster role of one layer."""
    l, m = graph[lid], plan.layers[lid]
    cfg = arch.cluster
    cores = cfg.num_cores
    tiles = m.tile.tiles_per_image
    tw = l.w_out / tiles
    copies = _copy_factor(graph, plan, lid) if lid != graph.sink.id else 1.0
    from_hbm = lid == graph.source.id

    def core(op: str, elems: float) -> float:
        return 0.0 if elems <= 0 else digital_latency(
            DigitalJob(op, max(1, math.ceil(elems)), cores), cfg)

    periods = []
    if m.kind == "analog":
        g = m.grid
        ka = l.k_x * l.k_y
        split = g.row_splits > 1
        relu = needs_relu(l, graph)
        for c in range(g.col_splits):
            cols = g.col_ranges[c][1] - g.col_ranges[c][0]
            out_bytes = cols * l.h_out * tw
            for i in range(g.row_splits):
                rows = g.dims(i, c)[0]
                ch = g.channels(i, ka)[1] - g.channels(i, ka)[0]
                in_bytes = ch * l.h_in * ((tw - 1) * l.stride + l.k_x)
                mvms = max(1, round(l.h_out * tw))
                ima = job_cycles(ImaJob(mvms, rows, cols), arch.crossbar, arch.clock_ghz)
                cw = core("im2col_prep", mvms * rows / 1) + (
                    0 if split or not relu else core("relu", out_bytes))
                din = _xfer(in_bytes, arch, hbm=True) if from_hbm else in_bytes / 64
                dout = (_xfer(out_bytes * arch.partial_sum_bytes, arch) if split
                        else copies * _xfer(out_bytes, arch))
                periods.append(max(ima, cw, din, dout))
            if split:
                tree = m.template_tree()
                for s, stage in enumerate(tree.stages):
                    last = s == tree.depth - 1
                    for inputs in stage:
                        n = len(inputs)
                        psum = out_bytes * arch.partial_sum_bytes
                        cw = core("partial_sum_reduce", (n - 1) * cols * l.h_out * tw)
                        if last and relu:
                            cw += core("relu", cols * l.h_out * tw)
                        dout = copies * _xfer(out_bytes, arch) if last else _xfer(psum, arch)
                        periods.append(max(cw, n * psum / 64, dout))
        per_tile = max(periods) + cfg.sync_cycles
        return per_tile * tiles / m.replication
    n = m.parallel
    in_bytes, out_bytes = _tile_bytes(l, max(1, round(tw)), 1, 1)
    if l.kind == "fully_connected":
        cw = core("fully_connected", l.c_in * l.c_out / n)
    elif l.kind == "maxpool":
        cw = core("maxpool", l.c_out * l.h_out * tw / n)
    elif l.kind == "avgpool":
        cw = core("avgpool", l.c_in * l.h_in * l.w_in / n)
    else:
        cw = core("residual_add", l.c_out * l.h_out * tw / n) + core(
            "relu", l.c_out * l.h_out * tw / n)
    din = in_bytes / n / 64
    if l.kind == "residual_add":
        skip_store = plan.residual_policy == "hbm"
        din = _xfer(in_bytes / 2 / n, arch, hbm=skip_store)
    dout = copies * _xfer(out_bytes / n, arch, hbm=lid == graph.sink.id)
    return (max(cw, din, dout) + cfg.sync_cycles) * tiles


def estimate_stages(graph: DnnGraph, plan: MappingPlan, arch: ArchConfig) -> dict[str, float]:
    return {l.id: estimate_layer(graph, plan, arch, l.id) for l in graph}


# ---------------------------------------------------------------- balancing

@dataclass
class BalanceStep:
    action: str
    layer: str
    factor: int
    period: float
    clusters: int


def _bump(plan: MappingPlan, graph: DnnGraph, lid: str) -> tuple[MappingPlan, str, int] | None:
    m = plan.layers[lid]
    if m.kind == "analog":
        return apply_replication(plan, graph, lid, m.replication + 1), "replicate", m.replication + 1
    if m.parallel >= max_parallel(graph[lid], m):
        return None
    return assign_parallel_clusters(plan, graph, lid, m.parallel + 1), "parallelize", m.parallel + 1


def balance_pipeline(graph: DnnGraph, arch: ArchConfig, plan: MappingPlan | None = None,
                     cluster_budget: int | None = None, ratio: float = 1.15,
                     tie: float = 0.02, max_rounds: int = 500) -> tuple[MappingPlan, list[BalanceStep]]:
    """Greedy balancing of the estimated stage latencies.

    Each round replicates (analog) or widens (digital) every stage within
    ``tie`` of the slowest one, in layer order. Rounds continue while the
    slowest stage exceeds ``ratio`` times the median and the budget
    remains. A round is kept only if it does not lower the estimated
    throughput per cluster; near-identical stages therefore move together
    and the loop stops once the next gain costs more than it returns.
    """
    plan = copy.deepcopy(plan) if plan else naive_plan(graph, arch)
    budget = cluster_budget if cluster_budget is not None else arch.num_clusters
    if plan.clusters_used > budget:
        raise MappingError(f"bare mapping needs {plan.clusters_used} clusters, budget {budget}")
    est = estimate_stages(graph, plan, arch)
    period = max(est.values())
    steps = [BalanceStep("start", "", 1, period, plan.clusters_used)]
    for _ in range(max_rounds):
        if period <= ratio * statistics.median(est.values()):
            break
        slow = [lid for lid in est if est[lid] >= period * (1 - tie)]
        cand, cand_est, round_steps = plan, dict(est), []
        try:
            for lid in slow:
                bumped = _bump(cand, graph, lid)
                if bumped is None:
                    continue
                cand, action, factor = bumped
                cand_est[lid] = estimate_layer(graph, cand, arch, lid)
                round_steps.append(BalanceStep(action, lid, factor, max(cand_est.values()),
                                               cand.clusters_used))
        except MappingError:
            break
        new_period = max(cand_est.values())
        if not round_steps or cand.clusters_used > budget or new_period >= period:
            break
        if period / new_period < cand.clusters_used / plan.clusters_used:
            break
        plan, est, period = cand, cand_est, new_period
        steps += round_steps
    return plan, steps


def build_preset(name: str, graph: DnnGraph, arch: ArchConfig, budget: int | None = None,
                 ratio: float = 1.15, policy: str | None = None) -> MappingPlan:
    """naive: bare mapping; replicated: balanced, residuals in HBM;
    final: replicated plus residuals in spare L1."""
    if name not in PRESETS:
        raise MappingError(f"unknown preset {name!r}; expected one of {PRESETS}")
    budget = arch.num_clusters if budget is None else budget
    plan = naive_plan(graph, arch)
    if plan.clusters_used > budget:
        raise MappingError(
            f"bare mapping needs {plan.clusters_used} clusters, budget is {budget}")
    if name != "naive":
        # keep room for the residual buffers the final preset adds
        spare = copy.deepcopy(plan)
        place_residuals(spare, graph, arch, "spare_l1")
        reserve = len(spare.spare_clusters)
        plan, _ = balance_pipeline(graph, arch, plan, max(plan.clusters_used, budget - reserve),
                                   ratio)
        place_residuals(plan, graph, arch, "hbm")
    if name == "final":
        place_residuals(plan, graph, arch, "spare_l1")
    if policy is not None and policy != plan.residual_policy:
        place_residuals(plan, graph, arch, policy)
    if plan.clusters_used > budget:
        raise MappingError(f"plan needs {plan.clusters_used} clusters, budget is {budget}")
    plan.preset = name
    return plan


# ---------------------------------------------------------------- checks

def fragment_footprint(plan: MappingPlan, graph: DnnGraph, arch: ArchConfig) -> dict[int, list[tuple[str, int, str]]]:
    """Declared L1 reservations per cluster: (buffer, bytes, purpose)."""
    out: dict[int, list[tuple[str, int, str]]] = {}
    ps = arch.partial_sum_bytes
    d = arch.channel_depth
    for l in graph:
        m = plan.layers[l.id]
        tw = m.tile.tile_w
        if m.kind == "digital":
            ifm, ofm = _tile_bytes(l, tw, 1, 1)
            n = m.parallel
            if l.kind == "fully_connected":
                share_in, share_out = ifm, -(-ofm // n)
            else:
                share_in, share_out = _tile_bytes(l, -(-tw // n), 1, 1)
            for c in m.clusters:
                out[c] = [("ifm", d * share_in, "ifm-tile"), ("ofm", d * share_out, "ofm-tile")]
            continue
        g = m.grid
        ka = l.k_x * l.k_y
        split = g.row_splits > 1
        ifm_cols = (tw - 1) * l.stride + l.k_x
        for r in range(m.replication):
            for c in range(g.col_splits):
                cols = g.col_ranges[c][1] - g.col_ranges[c][0]
                for i in range(g.row_splits):
                    lo, hi = g.channels(i, ka)
                    out[m.fragments[r][i][c]] = [
                        ("ifm", d * (hi - lo) * l.h_in * ifm_cols, "ifm-tile"),
                        ("ofm", d * cols * l.h_out * tw * (ps if split else 1), "ofm-tile")]
                if split:
                    t = m.trees[r][c]
                    for s, stage in enumerate(t.stages):
                        last = s == t.depth - 1
                        for j, inputs in enumerate(stage):
                            out[t.reducers[s][j]] = [
                                ("ifm", d * len(inputs) * cols * l.h_out * tw * ps, "ifm-tile"),
                                ("ofm", d * cols * l.h_out * tw * (1 if last else ps), "ofm-tile")]
    for b in plan.residual_buffers:
        if b.location == "cluster":
            out.setdefault(b.cluster, []).append((b.name, b.bytes, "residual"))
    return out


def plan_violations(plan: MappingPlan, graph: DnnGraph, arch: ArchConfig) -> list[str]:
    v = []
    if plan.clusters_used > arch.num_clusters:
        v.append(f"plan uses {plan.clusters_used} clusters > {arch.num_clusters}")
    seen: dict[int, str] = {}
    for lid, m in plan.layers.items():
        for c in m.clusters:
            if c in seen:
                v.append(f"cluster {c} assigned to both {seen[c]} and {lid}")
            seen[c] = lid
        if m.kind == "analog":
            g = m.grid
            if sum(b - a for a, b in g.row_ranges) != g.rows or \
                    sum(b - a for a, b in g.col_ranges) != g.cols:
                v.append(f"{lid}: fragments do not cover the weight matrix")
            for i in range(g.row_splits):
                for c in range(g.col_splits):
                    r, k = g.dims(i, c)
                    if r > arch.crossbar.rows or k > arch.crossbar.cols:
                        v.append(f"{lid}: fragment ({i},{c}) {r}x{k} exceeds crossbar")
    for c in plan.spare_clusters:
        if c in seen:
            v.append(f"spare cluster {c} also hosts {seen[c]}")
    for c, res in fragment_footprint(plan, graph, arch).items():
        total = sum(b for _, b, _ in res)
        if total > arch.cluster.l1_bytes:
            v.append(f"cluster {c}: footprint {total} B exceeds L1 {arch.cluster.l1_bytes} B")
    return v
