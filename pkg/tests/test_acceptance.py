"""Acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line, printed in the terminal summary.
The ResNet-18 (256x256, batch 16) runs are shared session fixtures.
"""

from __future__ import annotations

import math
import random
import statistics
import subprocess
import sys
import time

from aimcsim.config import ArchConfig, CrossbarConfig, NocConfig
from aimcsim.mapper import partition_layer, plan_reduction
from aimcsim.metrics import area_efficiency, latency_trend, throughput
from aimcsim.noc import HBM
from aimcsim.runtime import elaborate, run_batch, simulate, synthetic_pipeline
from oracles import noc_latency, pipeline_makespan
from test_noc import cl, simulate_one


def within(x: float, target: float, rel: float) -> bool:
    return abs(x - target) <= rel * target


def about(x: int, target: int) -> bool:
    """``~target`` cluster counts: within 15% or one cluster, whichever is larger."""
    return abs(x - target) <= max(1, 0.15 * target)


# ---------------------------------------------------------------- property based

def test_c01_determinism(criterion, runs, plans, resnet, arch, coeffs):
    first = runs["final"].to_json()
    again = run_batch(elaborate(plans["final"], resnet, arch), coeffs).to_json()
    ok = first == again
    assert criterion(1, "determinism", ok,
                     f"two final-plan runs {'identical' if ok else 'differ'} "
                     f"({len(first)} B report)")


def test_c02_noc_oracle(criterion):
    cfg = NocConfig()
    rng = random.Random(7)
    bad = []
    for _ in range(50):
        a, b = rng.sample(range(512), 2)
        nbytes = rng.randint(1, 1 << 16)
        to_hbm = rng.random() < 0.2
        dst, ref_dst = (HBM, None) if to_hbm else (cl(b), b)
        got = simulate_one(cfg, cl(a), dst, nbytes)
        if got != noc_latency(cfg, a, ref_dst, nbytes):
            bad.append((a, b, nbytes))
    assert criterion(2, "NoC oracle", not bad, f"{50 - len(bad)}/50 idle transfers exact")


def test_c03_pipeline_oracle(criterion):
    arch = ArchConfig()
    rng = random.Random(11)
    worst = 0.0
    for _ in range(100):
        n = rng.randint(2, 6)
        st = [rng.randint(1, 5000) for _ in range(n)]
        tiles = rng.randint(1, 24)
        clusters = rng.sample(range(512), n)
        res = simulate(synthetic_pipeline(st, tiles, arch, clusters=clusters))
        err = res.makespan_ps / arch.ps_per_cycle - pipeline_makespan(st, tiles, clusters, arch)
        worst = max(worst, abs(err))
    ok = worst <= 1
    assert criterion(3, "pipeline oracle", ok,
                     f"100 pipelines, worst error {worst:.0f} cycle(s), bound 1")


def test_c04_ima_lower_bound(criterion, runs, plans, resnet, arch):
    worst_low, worst_high, layers = math.inf, 0.0, 0
    for preset in ("naive", "replicated", "final"):
        rep, plan = runs[preset], plans[preset]
        busy = {c.cluster: c.buckets_ps["compute_analog"] for c in rep.clusters}
        for l in resnet:
            m = plan.layers[l.id]
            if m.kind != "analog":
                continue
            layers += 1
            bound = l.h_out * l.w_out * rep.batch * arch.mvm_cycles * arch.ps_per_cycle
            bound /= m.replication
            for i in range(m.row_splits):
                for c in range(m.col_splits):
                    mean = statistics.fmean(busy[m.fragments[r][i][c]]
                                            for r in range(m.replication))
                    worst_low = min(worst_low, mean / bound)
                    worst_high = max(worst_high, mean / bound)
    ok = worst_low >= 1 and worst_high <= 1.02
    assert criterion(4, "IMA lower bound", ok,
                     f"{layers} analog layers over 3 presets, busy/bound in "
                     f"[{worst_low:.4f}, {worst_high:.4f}], need [1, 1.02]")


def test_c05_mapping_arithmetic(criterion, resnet, plans):
    cb = CrossbarConfig()
    convs = [l for l in resnet if l.kind == "conv2d"]
    part_ok = len(convs) == 20
    for l in convs:
        g = partition_layer(l, cb)
        rs = next(k for k in range(1, 10_000) if k * 256 >= l.c_in * l.k_x * l.k_y)
        cs = next(k for k in range(1, 10_000) if k * 256 >= l.c_out)
        part_ok &= (g.row_splits, g.col_splits) == (rs, cs)
    tree_ok = True
    for r in range(2, 129):
        t = plan_reduction(r, 2)
        tree_ok &= t.depth == math.ceil(math.log2(r))
        prev = r
        for stage in t.stages:
            tree_ok &= sorted(i for grp in stage for i in grp) == list(range(prev))
            prev = len(stage)
    # the plan's own trees use a wider fan-in: depth is ceil(log_f)
    plan = plans["final"]
    for m in plan.layers.values():
        for rep in m.trees:
            for t in rep:
                f = m.fan_in
                tree_ok &= f ** (t.depth - 1) < len(t.producers) <= f ** t.depth
    ok = part_ok and tree_ok
    assert criterion(5, "mapping arithmetic", ok,
                     f"20 convs partitioned {'ok' if part_ok else 'WRONG'}, "
                     f"trees {'ok' if tree_ok else 'WRONG'}")


def test_c06_conservation(criterion, runs):
    cons = runs["final"].conservation
    ok = all(cons.values())
    assert criterion(6, "conservation", ok,
                     ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in sorted(cons.items())))


def test_c07_residual_envelope(criterion, plans):
    final, rep = plans["final"], plans["replicated"]
    s = final.summary()
    hosts = {b.cluster for b in final.residual_buffers}
    extra = final.clusters_used - rep.clusters_used
    ok = (s["residual_bytes"] >= s["residual_min_bytes"] > 0
          and all(b.bytes >= b.min_bytes for b in final.residual_buffers)
          and extra == s["spare_clusters"] == len(hosts))
    assert criterion(7, "residual envelope", ok,
                     f"min {s['residual_min_bytes'] / 1e6:.2f} MB, allocated "
                     f"{s['residual_bytes'] / 1e6:.2f} MB, {extra} extra clusters "
                     f"(reported {s['spare_clusters']})")


# ---------------------------------------------------------------- reproduction

def test_c08_cluster_utilization(criterion, plans):
    n = plans["final"].clusters_used
    assert criterion(8, "final plan clusters", abs(n - 322) <= 15, f"{n} of 512 (322 +- 15)")


def _rate(rep):
    return throughput(rep)["images_per_s"]


def test_c09a_replication_speedup(criterion, runs):
    r = _rate(runs["replicated"]) / _rate(runs["naive"])
    assert criterion(9, "replicated vs naive", r >= 1.4, f"{r:.2f}x (need >= 1.4)")


def test_c09b_residual_speedup(criterion, runs):
    r = _rate(runs["final"]) / _rate(runs["replicated"])
    assert criterion(9, "final vs replicated", r >= 1.6, f"{r:.3f}x (need >= 1.6)")


def test_c09c_replication_clusters(criterion, plans):
    extra = plans["replicated"].clusters_used - plans["naive"].clusters_used
    assert criterion(9, "replication extra clusters", about(extra, 61), f"+{extra} (~61)")


def test_c09d_residual_clusters(criterion, plans):
    extra = plans["final"].clusters_used - plans["replicated"].clusters_used
    assert extra == plans["final"].summary()["spare_clusters"]
    assert criterion(9, "residual extra clusters", about(extra, 2), f"+{extra} (~2)")


def test_c10a_throughput(criterion, runs):
    t = throughput(runs["final"])
    ok = 16.2 <= t["tops"] <= 24.2
    assert criterion(10, "steady-state TOPS", ok,
                     f"{t['tops']:.2f} TOPS over the batch, {t['images_per_s']:.0f} images/s "
                     f"(need 16.2-24.2; inter-image period gives {t['steady_tops']:.2f})")


def test_c10b_makespan(criterion, runs):
    ms = throughput(runs["final"])["makespan_ms"]
    assert criterion(10, "makespan", 4.8 <= ms <= 11, f"{ms:.2f} ms (need 4.8-11)")


def test_c10c_latency_trend(criterion, runs):
    rho = latency_trend(runs["final"])
    assert criterion(10, "latency trend", rho > 0.8, f"rank correlation {rho:.3f} (need > 0.8)")


def test_c11a_area_identity(criterion, runs):
    rep = runs["final"]
    gops = area_efficiency(rep)
    tops = throughput(rep)["steady_tops"]
    ok = math.isclose(gops, tops * 1e3 / 480, rel_tol=1e-9)
    assert criterion(11, "GOPS/mm2 identity", ok, f"{gops:.2f} GOPS/mm2 = {tops:.3f} TOPS / 480")


def test_c11b_group_spread(criterion, runs):
    eff = area_efficiency(runs["final"], "per-group")
    best = max(v for g, v in eff.items() if g < 5)
    ratio = best / eff[5]
    assert criterion(11, "per-group spread", ratio >= 10,
                     f"best early group {best:.0f} vs group 5 {eff[5]:.0f} GOPS/mm2, "
                     f"{ratio:.1f}x (need >= 10)")


def test_c12_energy(criterion, runs):
    e = runs["final"].energy
    mj = e["joules"] * 1e3
    ok = (within(e["tops_per_w"], 6.5, 0.10) and within(mj, 15, 0.20)
          and "calibrated, not independently predictive" in e["label"])
    assert criterion(12, "energy (calibrated)", ok,
                     f"{e['tops_per_w']:.2f} TOPS/W (6.5 +- 10%), {mj:.2f} mJ (15 +- 20%)")


def test_c13_host_time(criterion, runs, tmp_path):
    runs["final"]
    full = runs.wall_s["final"]
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "aimcsim.cli", "simulate",
                           "--workload", "builtin:toy", "--preset", "naive",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    smoke = time.perf_counter() - t0
    ok = proc.returncode == 0 and full < 20 * 60 and smoke < 10
    assert criterion(13, "host time", ok,
                     f"full ResNet-18 {full:.1f} s (< 1200), smoke CLI {smoke:.1f} s (< 10)")
