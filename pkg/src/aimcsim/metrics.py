"""Figures of merit from a finished run: throughput, breakdowns, area, energy."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from scipy.stats import spearmanr

from .cluster import BUCKETS
from .config import CostCoefficients

SCHEMA_VERSION = 1


@dataclass
class ClusterStats:
    cluster: int
    layer: str
    group: int
    role: str
    window_start_ps: int
    latency_ps: int  # last completion time
    buckets_ps: dict[str, int]
    reserved_bytes: int
    mvms: int = 0
    ima_utilization: float = 0.0

    @property
    def active_ps(self) -> int:
        return self.latency_ps - self.window_start_ps


@dataclass
class SimReport:
    preset: str
    batch: int
    clusters_used: int
    total_clusters: int
    makespan_ps: int
    image_done_ps: list[int]
    ops_per_image: int
    clusters: list[ClusterStats]
    links: list[dict]
    dma_bytes: dict[str, int]
    conservation: dict[str, bool]
    plan: dict
    group_ops: dict[int, int]
    mvms: int
    core_cycles: int
    link_bytes_by_level: list[int]
    trace_hash: str
    events: int
    cluster_area_mm2: float
    energy: dict = field(default_factory=dict)

    # throughput -----------------------------------------------------------
    @property
    def total_ops(self) -> int:
        return self.ops_per_image * self.batch

    @property
    def steady_period_ps(self) -> float:
        d = self.image_done_ps
        if len(d) < 2:
            return float(self.makespan_ps)
        return (max(d) - min(d)) / (len(d) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["throughput"] = throughput(self)
        d["area"] = {"whole_chip_gops_per_mm2": area_efficiency(self),
                     "per_group_gops_per_mm2": area_efficiency(self, "per-group")}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def throughput(r: SimReport) -> dict[str, float]:
    mk = r.makespan_ps * 1e-12
    per = r.steady_period_ps * 1e-12
    return {
        "tops": r.total_ops / mk / 1e12,
        "images_per_s": r.batch / mk,
        "steady_tops": r.ops_per_image / per / 1e12,
        "steady_images_per_s": 1.0 / per,
        "steady_period_cycles": r.steady_period_ps / 1000,
        "makespan_ms": r.makespan_ps * 1e-9,
    }


def area_efficiency(r: SimReport, scope: str = "whole-chip", steady: bool = True):
    """GOPS/mm²: the whole chip, or per layer group at the pipeline rate."""
    t = throughput(r)
    if scope == "whole-chip":
        tops = t["steady_tops"] if steady else t["tops"]
        return tops * 1e3 / (r.total_clusters * r.cluster_area_mm2)
    if scope != "per-group":
        raise ValueError(f"unknown scope {scope!r}")
    rate = t["steady_images_per_s"] if steady else t["images_per_s"]
    count: dict[int, int] = {}
    for c in r.clusters:
        if c.group >= 0:
            count[c.group] = count.get(c.group, 0) + 1
    return {g: r.group_ops[g] * rate / 1e9 / (n * r.cluster_area_mm2)
            for g, n in sorted(count.items()) if g in r.group_ops}


def energy(r: SimReport, coeffs: CostCoefficients) -> dict[str, float]:
    """Energy of the batch; clusters never used are power gated."""
    levels = r.link_bytes_by_level
    per_byte = list(coeffs.energy_per_byte_j) + [0.0] * (len(levels) - len(coeffs.energy_per_byte_j))
    parts = {
        "mvm_j": r.mvms * coeffs.energy_per_mvm_j,
        "noc_j": sum(b * e for b, e in zip(levels, per_byte)),
        "core_j": r.core_cycles * coeffs.energy_per_core_cycle_j,
        "leakage_j": coeffs.leakage_per_cluster_w * r.clusters_used * r.makespan_ps * 1e-12,
    }
    total = sum(parts.values())
    parts["joules"] = total
    parts["tops_per_w"] = r.total_ops / total / 1e12 if total > 0 else float("inf")
    parts["label"] = coeffs.label
    return parts


def inefficiency_report(r: SimReport, crossbar_cells: int = 256 * 256) -> dict[str, float]:
    analog = [c for c in r.clusters if c.role in ("fragment",)]
    used = sum(c.ima_utilization for c in analog)
    digital = [c for c in r.clusters if c.role in ("digital", "reducer")]
    core_util = (statistics.fmean(c.buckets_ps["compute_digital"] / c.active_ps
                                  for c in digital if c.active_ps) if digital else 0.0)
    busy: dict[str, float] = {}
    for c in r.clusters:
        if c.role == "residual":
            continue
        b = c.buckets_ps
        t = b["compute_analog"] + b["compute_digital"] + b["synchronization"]
        busy[c.layer] = max(busy.get(c.layer, 0.0), t)
    times = list(busy.values())
    return {
        "global": r.clusters_used / r.total_clusters,
        "local": used / len(analog) if analog else 0.0,
        "core_utilization": core_util,
        "unbalance": max(times) / statistics.median(times) if times else 1.0,
    }


def latency_trend(r: SimReport) -> float:
    """Rank correlation between cluster position and its last completion."""
    order = [c.cluster for c in r.clusters]
    lat = [c.latency_ps for c in r.clusters]
    if len(order) < 3:
        return 1.0
    return float(spearmanr(order, lat).statistic)


# ------------------------------------------------------------------ building

def build_report(inst, res, preset: str = "", coeffs: CostCoefficients | None = None) -> SimReport:
    from .runtime import PUSH  # local import keeps metrics importable on its own

    role_of: dict[int, str] = {s.cluster: s.role for s in inst.stages}
    clusters = []
    ima_util = {s.cluster: s.placement[0] * s.placement[1] /
                (inst.arch.crossbar.rows * inst.arch.crossbar.cols)
                for s in inst.stages if s.placement}
    mvm_by = {}
    for s in inst.stages:
        if s.placement:
            mvm_by[s.cluster] = sum(j.num_mvms for j in s.ima_jobs if j)
    for c in sorted(res.activity):
        log = res.activity[c]
        win = log.window()
        if win is None:
            continue
        layer = inst.layer_of_cluster.get(c, "?")
        clusters.append(ClusterStats(
            c, layer, inst.group_of_layer.get(layer, -1), role_of.get(c, "residual"),
            win[0], win[1], log.buckets(), res.reserved.get(c, 0), mvm_by.get(c, 0),
            ima_util.get(c, 0.0)))
    tiles_ok = all(res.tiles_in.get(s.idx, 0) == len(s.tiles) == res.tiles_out.get(s.idx, 0)
                   for s in inst.stages)
    pushes_ok = all(p.arrived for p in inst.pieces if p.kind == PUSH)
    cons = {
        "tiles": tiles_ok and pushes_ok,
        "mvms": res.mvms == inst.expected_mvms,
        "noc_bytes": res.bytes_issued == res.bytes_delivered == sum(p.bytes for p in inst.pieces),
        "footprint": all(res.reserved.get(c, 0) == sum(b for _, b, _ in res_list)
                         for c, res_list in inst.footprint.items()),
    }
    rep = SimReport(
        preset=preset or inst.plan_summary.get("preset", ""), batch=inst.num_images,
        clusters_used=inst.plan_summary.get("clusters_used", len(clusters)),
        total_clusters=inst.arch.num_clusters, makespan_ps=res.makespan_ps,
        image_done_ps=res.image_done_ps, ops_per_image=inst.ops_per_image, clusters=clusters,
        links=res.links, dma_bytes={"issued": res.bytes_issued, "delivered": res.bytes_delivered,
                                    "hbm_read": res.hbm_bytes["read"],
                                    "hbm_write": res.hbm_bytes["write"]},
        conservation=cons, plan=inst.plan_summary, group_ops=dict(inst.group_ops),
        mvms=res.mvms, core_cycles=res.core_cycles, link_bytes_by_level=res.link_bytes_by_level,
        trace_hash=res.trace_hash, events=res.events,
        cluster_area_mm2=(coeffs.cluster_area_mm2 if coeffs else inst.arch.cluster.cluster_area_mm2))
    if coeffs is not None:
        rep.energy = energy(rep, coeffs)
    return rep


# ------------------------------------------------------------------ export

CLUSTER_FIELDS = ("cluster", "layer", "group", "role", "window_start_ps", "latency_ps",
                  "active_ps", *BUCKETS, "reserved_bytes", "mvms", "ima_utilization")


def export(r: SimReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json, clusters.csv, links.csv and figure_data.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / f for k, f in (("json", "report.json"), ("clusters", "clusters.csv"),
                                         ("links", "links.csv"), ("figure", "figure_data.csv"))}
        paths["json"].write_text(r.to_json())
        with open(paths["clusters"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CLUSTER_FIELDS)
            for c in r.clusters:
                w.writerow([c.cluster, c.layer, c.group, c.role, c.window_start_ps, c.latency_ps,
                            c.active_ps, *(c.buckets_ps[b] for b in BUCKETS), c.reserved_bytes,
                            c.mvms, f"{c.ima_utilization:.6f}"])
        with open(paths["links"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("level", "index", "direction", "port", "bytes", "busy_cycles",
                        "utilization"))
            for row in r.links:
                w.writerow([row["level"], row["index"], row["direction"], row["port"], row["bytes"],
                            row["busy_cycles"], f"{row['utilization']:.6f}"])
        with open(paths["figure"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("series", "x", *BUCKETS, "latency_us", "gops_per_mm2"))
            for c in r.clusters:
                tot = c.active_ps or 1
                w.writerow(["cluster", c.cluster, *(f"{c.buckets_ps[b] / tot:.6f}" for b in BUCKETS),
                            f"{c.latency_ps / 1e6:.3f}", ""])
            for g, eff in area_efficiency(r, "per-group").items():
                w.writerow(["group", g, *([""] * len(BUCKETS)), "", f"{eff:.3f}"])
    except OSError as e:
        raise OSError(f"export to {out}: {e}") from e
    return paths
