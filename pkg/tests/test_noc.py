import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimcsim.config import NocConfig
from aimcsim.noc import (HBM, CapacityError, Network, Transaction, TxnKind, build_topology,
                         idle_latency_cycles)
from aimcsim.simkernel import ComponentId, Kernel, Kind
from oracles import noc_latency as oracle


def cl(i: int) -> ComponentId:
    return ComponentId(Kind.CLUSTER, i)


def simulate_one(cfg: NocConfig, src, dst, nbytes, kind=TxnKind.WRITE) -> int:
    k = Kernel()
    topo = build_topology(cfg)
    for c in range(topo.num_clusters):
        k.register(cl(c))
    net = Network(k, topo)
    done = []
    net.issue(Transaction(src, dst, nbytes, kind=kind), done.append)
    k.run()
    assert len(done) == 1
    return k.to_cycles(done[0].complete_time)


def test_sibling_example():
    assert simulate_one(NocConfig(), cl(0), cl(1), 4096) == 68


def test_hbm_example():
    assert simulate_one(NocConfig(), cl(0), HBM, 64) == 117


def test_fifty_random_cases_match_closed_form():
    cfg = NocConfig()
    rng = random.Random(2024)
    for _ in range(50):
        a, b = rng.sample(range(512), 2)
        nbytes = rng.randint(1, 1 << 16)
        if rng.random() < 0.2:
            src, dst, sa, sb = cl(a), HBM, a, None
        else:
            src, dst, sa, sb = cl(a), cl(b), a, b
        assert simulate_one(cfg, src, dst, nbytes) == oracle(cfg, sa, sb, nbytes)


@given(st.integers(0, 511), st.integers(0, 511), st.integers(1, 100_000))
def test_formula_helper_agrees_with_oracle(a, b, nbytes):
    cfg = NocConfig()
    if a == b:
        return
    assert idle_latency_cycles(build_topology(cfg), cl(a), cl(b), nbytes) == oracle(cfg, a, b, nbytes)


def test_narrow_link_sets_serialization():
    cfg = NocConfig(data_width_bytes=[64, 64, 16, 64, 64])
    # clusters 0 and 511 meet at the wrapper, crossing the 16 B level
    assert simulate_one(cfg, cl(0), cl(511), 1024) == oracle(cfg, 0, 511, 1024)


def test_read_adds_request_path_without_hbm_link():
    cfg = NocConfig()
    write = simulate_one(cfg, HBM, cl(3), 256)
    read = simulate_one(cfg, HBM, cl(3), 256, TxnKind.READ)
    assert read - write == 4 * 4


def test_route_shapes():
    topo = build_topology(NocConfig())
    assert len(topo.route(cl(0), cl(1))) == 1
    assert len(topo.route(cl(0), cl(4))) == 3
    assert len(topo.route(cl(0), HBM)) == 5
    assert [link[0] for link in topo.route(HBM, cl(7))] == [0, 1, 2, 3, 4]


def test_child_ports_are_separate_channels():
    topo = build_topology(NocConfig())
    # both transfers cross the wrapper but leave it on different ports
    (a,) = {l for l in topo.route(cl(0), cl(100)) if l[0] == 1}
    (b,) = {l for l in topo.route(cl(1), cl(300)) if l[0] == 1}
    assert a[:3] == b[:3] and a[3] != b[3]
    # the HBM link is a single channel per direction
    assert topo.route(cl(0), HBM)[-1] == topo.route(cl(511), HBM)[-1]


def test_contention_serializes_shared_link():
    cfg = NocConfig()
    k = Kernel()
    topo = build_topology(cfg)
    for c in range(512):
        k.register(cl(c))
    net = Network(k, topo)
    done = []
    for _ in range(2):
        net.issue(Transaction(cl(0), cl(1), 4096), done.append)
    k.run()
    t = sorted(k.to_cycles(x.complete_time) for x in done)
    assert t == [68, 68 + 64]


def test_hbm_bounds_checked():
    k = Kernel()
    net = Network(k, build_topology(NocConfig(hbm_size_bytes=1024)))
    k.register(cl(0))
    with pytest.raises(CapacityError):
        net.issue(Transaction(cl(0), HBM, 64, hbm_addr=1000), lambda t: None)


def test_bad_endpoint():
    with pytest.raises(KeyError):
        build_topology(NocConfig()).route(cl(0), cl(512))
