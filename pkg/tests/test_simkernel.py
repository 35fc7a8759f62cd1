import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimcsim.simkernel import ComponentId, Kernel, Kind, SimError, UnknownTarget

A = ComponentId(Kind.CLUSTER, 0)


def _kernel(**kw) -> Kernel:
    k = Kernel(**kw)
    k.register(A)
    return k


def test_equal_times_fire_in_insertion_order():
    k = _kernel()
    seen = []
    for i in range(5):
        k.call(A, 10, "e", seen.append, i)
    k.run()
    assert seen == [0, 1, 2, 3, 4]
    assert k.now == 10


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=40))
def test_delivery_is_time_ordered(delays):
    k = _kernel()
    seen = []
    for i, d in enumerate(delays):
        k.call(A, d, "e", lambda i=i: seen.append((k.now, i)))
    k.run()
    assert seen == sorted(seen)
    assert len(seen) == len(delays)


@given(st.lists(st.integers(0, 500), min_size=1, max_size=30))
def test_same_schedule_same_hash(delays):
    def once():
        k = _kernel()
        for d in delays:
            k.call(A, d, "e", lambda: None)
        k.run()
        return k.trace_hash()

    assert once() == once()


def test_hash_depends_on_times():
    def once(d):
        k = _kernel()
        k.call(A, d, "e", lambda: None)
        k.run()
        return k.trace_hash()

    assert once(1) != once(2)


def test_nested_scheduling_advances_time():
    k = _kernel()
    out = []

    def step(n):
        out.append(k.now)
        if n:
            k.call(A, k.cycles(1), "s", step, n - 1)

    k.call(A, 0, "s", step, 3)
    assert k.run() == 3000
    assert out == [0, 1000, 2000, 3000]


def test_run_until_stops_early():
    k = _kernel()
    k.call(A, 5, "a", lambda: None)
    k.call(A, 50, "b", lambda: None)
    k.run(until=10)
    assert k.pending() == 1


def test_errors():
    k = _kernel()
    with pytest.raises(SimError):
        k.call(A, -1, "neg", lambda: None)
    with pytest.raises(UnknownTarget):
        k.call(ComponentId(Kind.CLUSTER, 9), 0, "x", lambda: None)
    with pytest.raises(SimError):
        k.register(A)


def test_livelock_guard():
    k = _kernel(max_events=10)

    def again():
        k.call(A, 0, "loop", again)

    k.call(A, 0, "loop", again)
    with pytest.raises(SimError, match="livelock"):
        k.run()


def test_trace_dump(tmp_path):
    k = _kernel(trace=True)
    k.call(A, 3, "tagged", lambda: None)
    k.run()
    p = tmp_path / "t.csv"
    k.dump_trace(p)
    lines = p.read_text().splitlines()
    assert len(lines) == 2 and "tagged" in lines[1]
