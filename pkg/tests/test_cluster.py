import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimcsim.cluster import (BUCKETS, ActivityLog, CapacityError, DigitalJob, Dma, L1Ledger,
                             digital_latency, find_cycle)
from aimcsim.config import ClusterConfig, ConfigError, NocConfig
from aimcsim.noc import Network, build_topology
from aimcsim.simkernel import ComponentId, Kernel, Kind


def test_digital_latency_splits_over_cores():
    cfg = ClusterConfig()
    assert digital_latency(DigitalJob("relu", 1600, 16), cfg) == 50
    assert digital_latency(DigitalJob("residual_add", 17, 16), cfg) == 2


def test_digital_latency_errors():
    cfg = ClusterConfig()
    with pytest.raises(ConfigError):
        digital_latency(DigitalJob("fft", 1, 1), cfg)
    with pytest.raises(ValueError):
        digital_latency(DigitalJob("relu", 1, 17), cfg)


def test_ledger_overflow_names_buffer():
    led = L1Ledger(3, 1000)
    led.reserve("ifm", 600, "ifm-tile")
    with pytest.raises(CapacityError, match="cluster 3.*'ofm'.*400 B"):
        led.reserve("ofm", 500, "ofm-tile")
    led.release("ifm")
    led.reserve("ofm", 500, "ofm-tile")
    assert led.high_water == 600 and led.free == 500


def test_dma_completes_after_setup_plus_transfer():
    k = Kernel()
    net = Network(k, build_topology(NocConfig()))
    for c in range(2):
        k.register(ComponentId(Kind.CLUSTER, c))
    dcid = ComponentId(Kind.DMA, 0)
    k.register(dcid)
    dma = Dma(k, net, 0, ClusterConfig(), dcid)
    done = []
    dma.request("out", ComponentId(Kind.CLUSTER, 0), ComponentId(Kind.CLUSTER, 1), 4096,
                lambda t: done.append(k.now))
    k.run()
    assert done == [(10 + 68) * 1000]


def test_dma_rejects_overflowing_destination():
    k = Kernel()
    net = Network(k, build_topology(NocConfig()))
    led = L1Ledger(1, 1 << 20)
    led.reserve("ifm", 100, "ifm-tile")
    dma = Dma(k, net, 0, ClusterConfig(), ComponentId(Kind.DMA, 0), {1: led})
    with pytest.raises(CapacityError, match="overflows buffer 'ifm'"):
        dma.request("out", ComponentId(Kind.CLUSTER, 0), ComponentId(Kind.CLUSTER, 1), 200,
                    lambda t: None, dst_buffer="ifm")


intervals = st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 200)).map(
    lambda x: (x[0], x[0] + x[1])), max_size=8)


@given(intervals, intervals, intervals, intervals)
def test_buckets_partition_the_active_window(a, d, s, c):
    log = ActivityLog(a, d, s, c)
    b = log.buckets()
    assert set(b) == set(BUCKETS)
    win = log.window()
    total = 0 if win is None else win[1] - win[0]
    assert sum(b.values()) == total
    assert all(v >= 0 for v in b.values())


def test_bucket_priority():
    log = ActivityLog(analog=[(0, 10)], digital=[(5, 20)], comm=[(0, 30)])
    assert log.buckets() == {"compute_analog": 10, "compute_digital": 10, "synchronization": 0,
                             "communication": 10, "sleep": 0}


def test_find_cycle():
    assert find_cycle({1: {2}, 2: {3}, 3: {1}}) == [1, 2, 3, 1]
    assert find_cycle({1: {2}, 2: {3}}) == []
    assert find_cycle({}) == []
