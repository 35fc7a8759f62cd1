"""Hierarchical quadrant interconnect and HBM controller.

The topology is a tree: the wrapper at the root (above it, the HBM link),
then L3/L2/L1 routers down to the clusters. Each router has one up and
one down channel per child port. A transaction reserves each channel on its path for
``ceil(bytes / width)`` cycles in arrival order; idle latency reduces to
the sum of hop latencies plus serialization at the narrowest link.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .config import ConfigError, NocConfig
from .simkernel import ComponentId, Kernel, Kind, SimTime

HBM = ComponentId(Kind.HBM, 0)


class CapacityError(RuntimeError):
    pass


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


@dataclass
class RouterNode:
    level: int  # 0 = HBM link, 1 = wrapper, ..., n-1 = L1
    index: int
    parent: int | None
    children: list[ComponentId] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int]:
        return (self.level, self.index)


Link = tuple[int, int, Direction, int]  # (level, router index, direction, child port)


class Topology:
    def __init__(self, cfg: NocConfig):
        self.cfg = cfg
        f = cfg.quadrant_factors
        self.depth = len(f)
        self.num_clusters = math.prod(f[1:])
        # leaves-per-node at each level; level 0 (HBM link) spans everything
        self.span = [math.prod(f[lvl:]) for lvl in range(self.depth)]
        self.levels: list[list[RouterNode]] = []
        for lvl in range(self.depth):
            count = self.num_clusters // self.span[lvl]
            nodes = []
            for i in range(count):
                parent = None if lvl == 0 else (i * self.span[lvl]) // self.span[lvl - 1]
                nodes.append(RouterNode(lvl, i, parent))
            self.levels.append(nodes)
        self._offsets = [0]
        for lvl in range(self.depth):
            self._offsets.append(self._offsets[-1] + len(self.levels[lvl]))
        for lvl in range(1, self.depth):
            for node in self.levels[lvl]:
                self.levels[lvl - 1][node.parent].children.append(
                    ComponentId(Kind.ROUTER, self.router_id(lvl, node.index)))
        for c in range(self.num_clusters):
            self.levels[-1][c // f[-1]].children.append(ComponentId(Kind.CLUSTER, c))

    def router_id(self, level: int, index: int) -> int:
        return self._offsets[level] + index

    def router_key(self, rid: int) -> tuple[int, int]:
        for lvl in range(self.depth):
            if rid < self._offsets[lvl + 1]:
                return lvl, rid - self._offsets[lvl]
        raise KeyError(rid)

    @property
    def num_routers(self) -> int:
        return self._offsets[-1]

    def ancestor(self, cluster: int, level: int) -> int:
        return cluster // self.span[level]

    def count_by_level(self) -> list[int]:
        return [len(nodes) for nodes in self.levels]

    def _check(self, c: ComponentId) -> None:
        if c == HBM:
            return
        if c.kind != Kind.CLUSTER or not 0 <= c.index < self.num_clusters:
            raise KeyError(f"unknown endpoint {c}")

    def route(self, src: ComponentId, dst: ComponentId) -> list[Link]:
        """Channels traversed from ``src`` to ``dst`` (clusters or HBM)."""
        self._check(src)
        self._check(dst)
        if src == dst:
            raise ValueError("route: src == dst")
        leaf = self.depth - 1
        if dst == HBM:
            return [self._link(lvl, src.index, Direction.UP) for lvl in range(leaf, -1, -1)]
        if src == HBM:
            return [self._link(lvl, dst.index, Direction.DOWN) for lvl in range(0, leaf + 1)]
        a, b = src.index, dst.index
        lca = leaf
        while self.ancestor(a, lca) != self.ancestor(b, lca):
            lca -= 1
        up = [self._link(lvl, a, Direction.UP) for lvl in range(leaf, lca, -1)]
        down = [self._link(lvl, b, Direction.DOWN) for lvl in range(lca, leaf + 1)]
        return up + down

    def _link(self, level: int, cluster: int, d: Direction) -> Link:
        """Channel of the level-``level`` router on the port toward ``cluster``."""
        port = cluster if level == self.depth - 1 else self.ancestor(cluster, level + 1)
        return level, self.ancestor(cluster, level), d, port

    def link_latency(self, link: Link) -> int:
        return self.cfg.hop_latency_cycles[link[0]]

    def link_width(self, link: Link) -> int:
        return self.cfg.data_width_bytes[link[0]]

    def to_dict(self) -> dict:
        names = ["hbm_link", "wrapper"] + [f"L{self.depth - lvl}" for lvl in range(2, self.depth)]
        nodes = []
        for lvl, row in enumerate(self.levels):
            for n in row:
                nodes.append({
                    "id": self.router_id(lvl, n.index), "level": lvl, "name": names[lvl],
                    "index": n.index,
                    "parent": None if n.parent is None else self.router_id(lvl - 1, n.parent),
                    "children": [str(c) for c in n.children],
                })
        return {"num_clusters": self.num_clusters, "levels": names, "nodes": nodes}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def build_topology(cfg: NocConfig, num_clusters: int | None = None) -> Topology:
    v = cfg.violations()
    if v:
        raise ConfigError("; ".join(v))
    if num_clusters is not None and cfg.num_clusters != num_clusters:
        raise ConfigError(
            f"quadrant factor product {cfg.num_clusters} != cluster count {num_clusters}")
    return Topology(cfg)


class TxnKind(str, Enum):
    READ = "read"
    WRITE = "write"


@dataclass
class Transaction:
    src: ComponentId  # where the data comes from
    dst: ComponentId  # where the data goes
    bytes: int
    kind: TxnKind = TxnKind.WRITE
    hbm_addr: int | None = None
    issue_time: SimTime = 0
    complete_time: SimTime | None = None
    path: list[Link] = field(default_factory=list)
    tag: str = "txn"


def idle_latency_cycles(topo: Topology, src: ComponentId, dst: ComponentId,
                        nbytes: int, kind: TxnKind = TxnKind.WRITE) -> int:
    """Closed-form completion time of one transaction on an idle network."""
    path = topo.route(src, dst)
    total = sum(topo.link_latency(l) for l in path)
    total += math.ceil(nbytes / min(topo.link_width(l) for l in path))
    if kind == TxnKind.READ:
        total += sum(topo.link_latency(l) for l in topo.route(dst, src) if l[0] != 0)
    return total


class Network:
    """Event-driven contention model bound to a kernel."""

    def __init__(self, kernel: Kernel, topo: Topology):
        self.k = kernel
        self.topo = topo
        self.busy_until: dict[Link, SimTime] = defaultdict(int)
        self.link_bytes: dict[Link, int] = defaultdict(int)
        self.link_busy_ps: dict[Link, int] = defaultdict(int)
        self.bytes_issued: dict[tuple[str, str], int] = defaultdict(int)
        self.bytes_delivered: dict[tuple[str, str], int] = defaultdict(int)
        self.hbm_bytes = {"read": 0, "write": 0}
        self.completed: list[Transaction] = []
        self.keep_log = False
        for rid in range(topo.num_routers):
            cid = ComponentId(Kind.ROUTER, rid)
            if not kernel.is_registered(cid):
                kernel.register(cid)
        if not kernel.is_registered(HBM):
            kernel.register(HBM)

    def issue(self, txn: Transaction, on_complete: Callable[[Transaction], None]) -> None:
        if txn.bytes <= 0:
            raise ValueError("transaction needs bytes > 0")
        if HBM in (txn.src, txn.dst) and txn.hbm_addr is not None:
            if txn.hbm_addr < 0 or txn.hbm_addr + txn.bytes > self.topo.cfg.hbm_size_bytes:
                raise CapacityError(
                    f"HBM access [{txn.hbm_addr}, {txn.hbm_addr + txn.bytes}) beyond "
                    f"{self.topo.cfg.hbm_size_bytes} bytes")
        txn.issue_time = self.k.now
        txn.path = self.topo.route(txn.src, txn.dst)
        self.bytes_issued[(str(txn.src), str(txn.dst))] += txn.bytes
        delay = 0
        if txn.kind == TxnKind.READ:
            # zero-size request travels to the data holder; no bandwidth used
            delay = sum(self.topo.link_latency(l)
                        for l in self.topo.route(txn.dst, txn.src) if l[0] != 0)
        self.k.call(self._router_cid(txn.path[0]), self.k.cycles(delay), "hop",
                    self._hop, txn, 0, on_complete)

    def _router_cid(self, link: Link) -> ComponentId:
        return ComponentId(Kind.ROUTER, self.topo.router_id(link[0], link[1]))

    def _hop(self, txn: Transaction, h: int, on_complete) -> None:
        link = txn.path[h]
        now = self.k.now
        start = max(now, self.busy_until[link])
        ser = self.k.cycles(math.ceil(txn.bytes / self.topo.link_width(link)))
        self.busy_until[link] = start + ser
        self.link_bytes[link] += txn.bytes
        self.link_busy_ps[link] += ser
        arrive = start + self.k.cycles(self.topo.link_latency(link))
        if h + 1 < len(txn.path):
            self.k.call_at(self._router_cid(txn.path[h + 1]), arrive, "hop",
                           self._hop, txn, h + 1, on_complete)
        else:
            width = min(self.topo.link_width(l) for l in txn.path)
            done = arrive + self.k.cycles(math.ceil(txn.bytes / width))
            target = txn.dst if self.k.is_registered(txn.dst) else HBM
            self.k.call_at(target, done, "txn_done", self._done, txn, on_complete)

    def _done(self, txn: Transaction, on_complete) -> None:
        txn.complete_time = self.k.now
        self.bytes_delivered[(str(txn.src), str(txn.dst))] += txn.bytes
        if txn.src == HBM:
            self.hbm_bytes["read"] += txn.bytes
        elif txn.dst == HBM:
            self.hbm_bytes["write"] += txn.bytes
        if self.keep_log:
            self.completed.append(txn)
        on_complete(txn)

    def link_report(self, makespan_ps: SimTime) -> list[dict]:
        rows = []
        for link in sorted(self.link_bytes, key=lambda l: (l[0], l[1], l[2].value, l[3])):
            busy = self.link_busy_ps[link]
            rows.append({
                "level": link[0], "index": link[1], "direction": link[2].value, "port": link[3],
                "bytes": self.link_bytes[link], "busy_cycles": self.k.to_cycles(busy),
                "utilization": busy / makespan_ps if makespan_ps else 0.0,
            })
        return rows
