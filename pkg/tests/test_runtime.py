import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimcsim.cluster import DeadlockError
from aimcsim.config import ArchConfig, ClusterConfig
from aimcsim.dnn import DnnGraph, LayerSpec, _conv, build_toy_cnn
from aimcsim.mapper import apply_replication, build_preset
from aimcsim.runtime import (PUSH, Channel, ElaborationError, Piece, elaborate, run_batch,
                             simulate, synthetic_pipeline)
from oracles import pipeline_makespan

ARCH = ArchConfig()


@given(st.lists(st.integers(1, 3000), min_size=2, max_size=6), st.integers(1, 12),
       st.randoms(use_true_random=False))
def test_linear_pipeline_matches_closed_form(stage_cycles, tiles, rnd):
    clusters = rnd.sample(range(512), len(stage_cycles))
    res = simulate(synthetic_pipeline(stage_cycles, tiles, ARCH, clusters=clusters))
    got = res.makespan_ps / ARCH.ps_per_cycle
    assert abs(got - pipeline_makespan(stage_cycles, tiles, clusters, ARCH)) <= 1


def test_back_pressure_bounds_channel_occupancy():
    inst = synthetic_pipeline([10, 5000], 20, ARCH)
    res = simulate(inst)
    assert res.channel_high_water == inst.channels[(0, 1)].capacity == ARCH.channel_depth
    # the fast producer runs at most its output depth plus the channel ahead
    ahead = 2 * ARCH.channel_depth
    last = max(f.sync[0] for f in res.firings if f.stage == 0)
    assert last >= (20 - ahead - 1) * 5050 * ARCH.ps_per_cycle


def test_wait_cycle_is_reported():
    inst = synthetic_pipeline([100, 100], 3, ARCH)
    inst.pieces.append(Piece(PUSH, 1, 0, 0, 0, 64))
    inst.stages[1].outbound[0].append(len(inst.pieces) - 1)
    inst.stages[0].inbound[0].append(len(inst.pieces) - 1)
    inst.channels[(1, 0)] = Channel(1, 0, 2, 1)
    with pytest.raises(DeadlockError, match="cluster0 -> cluster1 -> cluster0") as e:
        simulate(inst)
    assert e.value.cycle == [0, 1, 0]


def residual_graph() -> DnnGraph:
    a = _conv("A", None, 8, 16, 3, 1, 1, 32, 32)
    b = _conv("B", "A", 16, 16, 3, 1, 1, 32, 32)
    c = _conv("C", "B", 16, 16, 3, 1, 1, 32, 32)
    add = LayerSpec("D", "residual_add", 16, 16, 1, 1, 1, 0, 32, 32, 32, 32, ["C", "A"])
    return DnnGraph([a, b, c, add], batch=2, image_h=32, image_w=32).validate()


def test_undersized_residual_store_deadlocks():
    arch = ArchConfig(cluster=ClusterConfig(l1_bytes=32 * 1024))
    g = residual_graph()
    inst = elaborate(build_preset("naive", g, arch), g, arch)
    assert simulate(inst).makespan_ps > 0
    inst.stores["res:A->D"].capacity_tiles = 1
    with pytest.raises(DeadlockError, match="wait cycle") as e:
        simulate(inst)
    assert len(e.value.cycle) >= 3


def test_instance_can_be_simulated_twice():
    g = residual_graph()
    inst = elaborate(build_preset("naive", g, ARCH, policy="spare_l1"), g, ARCH)
    a, b = simulate(inst), simulate(inst)
    assert a.makespan_ps == b.makespan_ps and a.trace_hash == b.trace_hash


@pytest.mark.parametrize("policy", ["hbm", "spare_l1"])
def test_residual_graph_conserves(policy):
    g = residual_graph()
    rep = run_batch(elaborate(build_preset("naive", g, ARCH, policy=policy), g, ARCH))
    assert all(rep.conservation.values()), rep.conservation
    assert len(rep.image_done_ps) == 2 and min(rep.image_done_ps) > 0


def test_column_split_fan_out():
    # 512 output channels give two column splits; the consumer needs both halves
    a = _conv("A", None, 16, 512, 3, 1, 1, 8, 8)
    b = _conv("B", "A", 512, 16, 1, 1, 0, 8, 8)
    g = DnnGraph([a, b], batch=2, image_h=8, image_w=8).validate()
    plan = build_preset("naive", g, ARCH)
    assert plan.layers["A"].col_splits == 2
    assert plan.layers["B"].row_splits == 2
    inst = elaborate(plan, g, ARCH)
    srcs = {inst.stages[p.src].cluster for p in inst.pieces
            if p.kind == PUSH and inst.stages[p.src].layer == "A"}
    assert srcs == set(plan.layers["A"].clusters)
    # each B fragment reads from exactly one A column split
    for frag in (st for st in inst.stages if st.layer == "B" and st.role == "fragment"):
        feeders = {inst.stages[p.src].cluster for pids in frag.inbound for p in
                   (inst.pieces[i] for i in pids) if p.kind == PUSH}
        assert len(feeders) == 1
    rep = run_batch(inst)
    assert all(rep.conservation.values())


def test_replicas_share_tiles():
    g = build_toy_cnn(image_w=64, batch=3)
    arch = ArchConfig(cluster=ClusterConfig(l1_bytes=64 * 1024))
    plan = apply_replication(build_preset("naive", g, arch), g, "C0", 2)
    inst = elaborate(plan, g, arch)
    owned = [sorted(s.tiles) for s in inst.stages if s.layer == "C0"]
    assert len(owned) == 2
    assert sorted(owned[0] + owned[1]) == list(range(len(owned[0]) + len(owned[1])))
    assert all(t % 2 == 0 for t in owned[0]) and all(t % 2 == 1 for t in owned[1])
    assert all(run_batch(inst).conservation.values())


def test_elaborate_rejects_foreign_plan():
    g = build_toy_cnn()
    plan = build_preset("naive", g, ARCH)
    with pytest.raises(ElaborationError, match="do not match"):
        elaborate(plan, residual_graph(), ARCH)


def test_firing_records_are_consistent():
    g = build_toy_cnn()
    rep = run_batch(elaborate(build_preset("naive", g, ARCH), g, ARCH))
    for f in rep.firings:
        assert f.ready <= f.sync[0] < f.sync[1]
        assert f.sync[1] - f.sync[0] == ARCH.cluster.sync_cycles * ARCH.ps_per_cycle
        if f.ima:
            assert f.ima[0] >= f.sync[1]
