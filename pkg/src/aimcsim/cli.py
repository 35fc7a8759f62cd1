"""Command-line front end.

Exit codes: 0 success, 1 simulation error (deadlock, nondeterminism),
2 configuration or mapping error. Outputs go under ``--out`` (default
``$AIMCSIM_OUT`` or ``./aimcsim-out``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .cluster import CapacityError, DeadlockError
from .config import ArchConfig, ConfigError, CostCoefficients
from .dnn import DnnGraph, TilingError, WorkloadError, build_resnet18, build_toy_cnn
from .mapper import (POLICIES, PRESETS, MappingError, MappingPlan, build_preset,
                     plan_violations)
from .metrics import area_efficiency, export, inefficiency_report, latency_trend, throughput
from .runtime import ElaborationError, elaborate, run_batch, write_firings
from .simkernel import SimError

OUT_ENV = "AIMCSIM_OUT"
CONFIG_ERRORS = (ConfigError, WorkloadError, TilingError, MappingError, ElaborationError,
                 FileNotFoundError, json.JSONDecodeError)


@dataclass
class ExperimentConfig:
    arch: str | None
    workload: str
    batch: int | None
    preset: str
    policy: str | None
    budget: int | None
    ratio: float
    out: Path
    trace: bool
    plan: str | None = None
    costs: str | None = None

    def load_arch(self) -> ArchConfig:
        return ArchConfig.load(self.arch).validate()

    def load_workload(self) -> DnnGraph:
        w = self.workload
        if w.startswith("builtin:"):
            name, _, dims = w[len("builtin:"):].partition(":")
            kw = {}
            if dims:
                try:
                    h, wd = (int(x) for x in dims.lower().split("x"))
                except ValueError:
                    raise WorkloadError(f"bad builtin dims {dims!r}; use HxW") from None
                kw = {"image_h": h, "image_w": wd}
            builders = {"resnet18": build_resnet18, "toy": build_toy_cnn}
            if name not in builders:
                raise WorkloadError(f"unknown builtin workload {name!r}; have {sorted(builders)}")
            g = builders[name](**kw)
        else:
            g = DnnGraph.load(w)
        if self.batch is not None:
            g.batch = self.batch
        return g.validate()

    def load_plan(self, graph: DnnGraph, arch: ArchConfig) -> MappingPlan:
        if self.plan:
            return MappingPlan.load(self.plan)
        return build_preset(self.preset, graph, arch, self.budget, self.ratio, self.policy)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--arch", help="architecture JSON (default: shipped defaults)")
    common.add_argument("--workload", default="builtin:resnet18",
                        help="builtin:resnet18[:HxW], builtin:toy, or a workload JSON")
    common.add_argument("--batch", type=int, help="override the workload batch size")
    common.add_argument("--preset", choices=PRESETS, default="final")
    common.add_argument("--policy", choices=POLICIES, help="override the residual policy")
    common.add_argument("--budget", type=int, help="cluster budget for balancing")
    common.add_argument("--ratio", type=float, default=1.15,
                        help="balance until slowest <= ratio x median stage")
    common.add_argument("--out", type=Path, help=f"output directory (env {OUT_ENV})")
    common.add_argument("--plan", help="use a saved plan JSON instead of a preset")

    ap = argparse.ArgumentParser(prog="aimcsim", description="AIMC cluster-array simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("map", parents=[common], help="build a mapping plan")
    sim = sub.add_parser("simulate", parents=[common], help="simulate a batch")
    sim.add_argument("--trace", action="store_true", help="also write the event trace CSV")
    sim.add_argument("--repeat", type=int, default=1,
                     help="run N times and require identical reports")
    sim.add_argument("--costs", help="cost coefficient JSON (default: shipped calibration)")
    sub.add_parser("validate", parents=[common], help="check arch, workload and plan")
    rep = sub.add_parser("report", help="summarize a report.json")
    rep.add_argument("path", type=Path)
    return ap


def _config(ns: argparse.Namespace) -> ExperimentConfig:
    out = ns.out or Path(os.environ.get(OUT_ENV, "aimcsim-out"))
    return ExperimentConfig(ns.arch, ns.workload, ns.batch, ns.preset, ns.policy, ns.budget,
                            ns.ratio, out, getattr(ns, "trace", False), ns.plan,
                            getattr(ns, "costs", None))


def cmd_map(cfg: ExperimentConfig) -> int:
    arch, graph = cfg.load_arch(), cfg.load_workload()
    plan = cfg.load_plan(graph, arch)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"plan_{plan.preset}.json"
    plan.dump(path)
    s = plan.summary()
    print(f"preset {s['preset']}: {s['clusters_used']} / {s['total_clusters']} clusters "
          f"({s['weight_clusters']} hold weights, {s['spare_clusters']} residual)")
    for lid, m in plan.layers.items():
        extra = f"x{m.replication}" if m.kind == "analog" else f"par {m.parallel}"
        grid = f"{m.row_splits}x{m.col_splits}" if m.grid else "-"
        print(f"  {lid:5s} {m.kind:7s} grid {grid:5s} {extra:7s} clusters {m.num_clusters:3d} "
              f"tile_w {m.tile.tile_w}")
    print(f"residuals: {s['residual_policy']}, {s['residual_bytes']} B allocated, "
          f"{s['residual_min_bytes']} B minimum")
    print(f"wrote {path}")
    return 0


def cmd_simulate(cfg: ExperimentConfig, repeat: int = 1) -> int:
    arch, graph = cfg.load_arch(), cfg.load_workload()
    plan = cfg.load_plan(graph, arch)
    coeffs = CostCoefficients.load(cfg.costs)
    cfg.out.mkdir(parents=True, exist_ok=True)
    texts = []
    rep = None
    for i in range(max(1, repeat)):
        inst = elaborate(plan, graph, arch)
        trace = cfg.out / "trace.csv" if cfg.trace and i == 0 else None
        rep = run_batch(inst, coeffs, trace_path=trace)
        texts.append(rep.to_json())
    if len(set(texts)) != 1:
        print("error: repeated runs produced different reports", file=sys.stderr)
        return 1
    paths = export(rep, cfg.out)
    write_firings(rep.firings, cfg.out / "firings.csv")
    plan.dump(cfg.out / "plan.json")
    t = throughput(rep)
    print(f"preset {plan.preset}, batch {rep.batch}, {rep.clusters_used} clusters")
    print(f"makespan {t['makespan_ms']:.3f} ms, steady period {t['steady_period_cycles']:.0f} cycles")
    print(f"TOPS {t['steady_tops']:.2f} steady ({t['tops']:.2f} over the makespan)")
    print(f"images/s {t['steady_images_per_s']:.0f} steady ({t['images_per_s']:.0f} over the makespan)")
    print(f"GOPS/mm2 {area_efficiency(rep):.1f}")
    print(f"TOPS/W {rep.energy['tops_per_w']:.2f} ({rep.energy['joules'] * 1e3:.2f} mJ, "
          f"{rep.energy['label']})")
    ineff = inefficiency_report(rep)
    print(f"utilization global {ineff['global']:.3f}, local {ineff['local']:.3f}, "
          f"unbalance {ineff['unbalance']:.2f}, latency trend {latency_trend(rep):.3f}")
    if repeat > 1:
        print(f"{repeat} runs identical (trace {rep.trace_hash[:16]})")
    print(f"wrote {paths['json']}")
    return 0


def cmd_validate(cfg: ExperimentConfig) -> int:
    problems: list[str] = []
    arch = graph = None
    try:
        arch = ArchConfig.load(cfg.arch)
        problems += [f"arch: {v}" for v in arch.violations()]
    except CONFIG_ERRORS as e:
        problems.append(f"arch: {e}")
    try:
        graph = cfg.load_workload()
    except CONFIG_ERRORS as e:
        problems.append(f"workload: {e}")
    if arch is not None and graph is not None and not problems:
        try:
            plan = cfg.load_plan(graph, arch)
            problems += [f"plan: {v}" for v in plan_violations(plan, graph, arch)]
        except CONFIG_ERRORS as e:
            problems.append(f"plan: {e}")
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return 2 if problems else 0


def cmd_report(path: Path) -> int:
    d = json.loads(Path(path).read_text())
    t = d["throughput"]
    print(f"preset {d['preset']}, batch {d['batch']}, {d['clusters_used']}/{d['total_clusters']} clusters")
    print(f"makespan {t['makespan_ms']:.3f} ms, steady TOPS {t['steady_tops']:.2f}, "
          f"images/s {t['steady_images_per_s']:.0f}")
    print(f"GOPS/mm2 {d['area']['whole_chip_gops_per_mm2']:.1f}")
    for g, eff in d["area"]["per_group_gops_per_mm2"].items():
        print(f"  group {g}: {eff:.1f} GOPS/mm2")
    if d.get("energy"):
        print(f"TOPS/W {d['energy']['tops_per_w']:.2f} ({d['energy']['joules'] * 1e3:.2f} mJ)")
    print("conservation: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}"
                                       for k, v in d["conservation"].items()))
    return 0


def main(argv: list[str] | None = None) -> int:
    ns = _parser().parse_args(argv)
    try:
        if ns.cmd == "report":
            return cmd_report(ns.path)
        cfg = _config(ns)
        if ns.cmd == "map":
            return cmd_map(cfg)
        if ns.cmd == "simulate":
            return cmd_simulate(cfg, ns.repeat)
        return cmd_validate(cfg)
    except (DeadlockError, SimError, CapacityError) as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return 1
    except CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
