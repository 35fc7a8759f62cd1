"""Closed-form references shared by the unit and acceptance tests."""

from __future__ import annotations

import math

from aimcsim.config import ArchConfig, NocConfig
from aimcsim.noc import build_topology, idle_latency_cycles
from aimcsim.simkernel import ComponentId, Kind


def noc_latency(cfg: NocConfig, src: int | None, dst: int | None, nbytes: int) -> int:
    """Hop latencies along the tree path plus serialization at the narrowest link.

    ``None`` stands for HBM, reached through every level including the
    HBM link at level 0.
    """
    f = cfg.quadrant_factors
    leaf = len(f) - 1
    span = [math.prod(f[lvl:]) for lvl in range(len(f))]
    if src is None or dst is None:
        levels = list(range(0, leaf + 1))
    else:
        lca = max(lvl for lvl in range(len(f)) if src // span[lvl] == dst // span[lvl])
        levels = list(range(lca + 1, leaf + 1)) + list(range(lca, leaf + 1))
    hops = sum(cfg.hop_latency_cycles[lvl] for lvl in levels)
    width = min(cfg.data_width_bytes[lvl] for lvl in levels)
    return hops + math.ceil(nbytes / width)


def pipeline_makespan(stage_cycles: list[int], tiles: int, clusters: list[int],
                      arch: ArchConfig, piece_bytes: int = 64) -> int:
    """Fill time (every stage once plus each hop) then one bottleneck per tile."""
    topo = build_topology(arch.noc)
    sync = arch.cluster.sync_cycles
    hops = sum(arch.cluster.dma_setup_cycles +
               idle_latency_cycles(topo, ComponentId(Kind.CLUSTER, a),
                                   ComponentId(Kind.CLUSTER, b), piece_bytes)
               for a, b in zip(clusters, clusters[1:]))
    fill = sum(s + sync for s in stage_cycles) + hops
    return fill + (tiles - 1) * max(s + sync for s in stage_cycles)
