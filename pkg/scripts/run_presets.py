"""Run the three ResNet-18 presets and print a comparison table.

Each preset's full output (report, CSVs, plan) goes to ``OUT/<preset>``
and a summary of all runs to ``OUT/presets.json``.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from aimcsim.config import ArchConfig, CostCoefficients
from aimcsim.dnn import build_resnet18
from aimcsim.mapper import PRESETS, build_preset
from aimcsim.metrics import area_efficiency, export, throughput
from aimcsim.runtime import elaborate, run_batch


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("out/presets"))
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--presets", nargs="+", choices=PRESETS, default=list(PRESETS))
    args = ap.parse_args(argv)

    arch = ArchConfig.load()
    coeffs = CostCoefficients.load()
    graph = build_resnet18(batch=args.batch)
    rows = {}
    for name in args.presets:
        t0 = time.perf_counter()
        plan = build_preset(name, graph, arch)
        rep = run_batch(elaborate(plan, graph, arch), coeffs)
        wall = time.perf_counter() - t0
        export(rep, args.out / name)
        t = throughput(rep)
        rows[name] = {
            "clusters": plan.clusters_used,
            "makespan_ms": t["makespan_ms"],
            "images_per_s": t["images_per_s"],
            "tops": t["tops"],
            "steady_tops": t["steady_tops"],
            "gops_per_mm2": area_efficiency(rep),
            "energy_mj": rep.energy["joules"] * 1e3,
            "tops_per_w": rep.energy["tops_per_w"],
            "conservation_ok": all(rep.conservation.values()),
            "wall_s": wall,
        }

    print(f"{'preset':<11}{'clusters':>9}{'ms':>9}{'img/s':>9}{'TOPS':>8}"
          f"{'steady':>8}{'mJ':>8}{'TOPS/W':>8}{'wall s':>8}")
    for name, r in rows.items():
        print(f"{name:<11}{r['clusters']:>9}{r['makespan_ms']:>9.3f}{r['images_per_s']:>9.0f}"
              f"{r['tops']:>8.2f}{r['steady_tops']:>8.2f}{r['energy_mj']:>8.2f}"
              f"{r['tops_per_w']:>8.2f}{r['wall_s']:>8.1f}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "presets.json").write_text(json.dumps(rows, indent=1) + "\n")
    return 0 if all(r["conservation_ok"] for r in rows.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
