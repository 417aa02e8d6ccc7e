import heapq
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfabric.clock import VirtualClock
from fedfabric.errors import CapacityExceededError, NotFoundError, TransferError
from fedfabric.refcore import ObjectKey, StoreKind
from fedfabric.stores import StoreRegistry, build_backend, connect
from fedfabric.stores.local import FileSystemStore, InMemoryStore, WideAreaStore
from fedfabric.stores.model import NetworkModel, StoreConfig, TicketState
from fedfabric.stores.server import StoreServer

INSTANT = NetworkModel()


def key(n, sid="s"):
    return ObjectKey.new(sid, n)


def fifo_oracle(enqueues, durations, slots):
    """Event-stepping FIFO admission: walk completion and arrival events in
    time order, admitting the head of the queue whenever a slot is free."""
    pending = list(range(len(enqueues)))
    running = []  # heap of (finish, idx)
    start = [None] * len(enqueues)
    t = 0.0
    while pending or running:
        arrivals = [enqueues[i] for i in pending]
        next_arrival = min(arrivals) if arrivals else math.inf
        next_finish = running[0][0] if running else math.inf
        t = max(t, min(next_arrival, next_finish))
        while running and running[0][0] <= t:
            heapq.heappop(running)
        while pending and len(running) < slots and enqueues[pending[0]] <= t:
            i = pending.pop(0)
            start[i] = t
            heapq.heappush(running, (t + durations[i], i))
        if pending and len(running) == slots:
            t = max(t, running[0][0])
    return start


@given(
    sizes=st.lists(st.integers(0, 50_000_000), min_size=1, max_size=12),
    gaps=st.lists(st.floats(0, 3), min_size=12, max_size=12),
    slots=st.integers(1, 4),
)
@settings(max_examples=60, deadline=None)
def test_wide_area_schedule_matches_oracle(tmp_path_factory, sizes, gaps, slots):
    model = NetworkModel(request_latency_ms=0, startup_latency_ms=1000, bandwidth_bytes_per_s=50e6,
                         max_concurrent_transfers=slots)
    clock = VirtualClock()
    store = WideAreaStore("w", tmp_path_factory.mktemp("w"), model, clock, staging_model=INSTANT)
    enq = list(np.cumsum(gaps[: len(sizes)]))
    tickets = []
    for n, t in zip(sizes, enq):
        clock.sleep_until(t)
        tickets.append(store._schedule(ObjectKey("w", "ab" * 16, n), clock.now()))
    durations = [1.0 + n / 50e6 for n in sizes]
    expected = fifo_oracle(enq, durations, slots)
    for tk, s, d in zip(tickets, expected, durations):
        assert tk.start_time == pytest.approx(s, abs=1e-9)
        assert tk.completion_time == pytest.approx(s + d, abs=1e-9)


def test_wide_area_concurrency_cap(tmp_path):
    model = NetworkModel(startup_latency_ms=1000, max_concurrent_transfers=2)
    clock = VirtualClock()
    store = WideAreaStore("w", tmp_path, model, clock, staging_model=INSTANT)
    for _ in range(5):
        store.put(key(10, "w"), b"x" * 10)
    assert store.active_transfers(0.5) == 2
    states = sorted(t.state_at(0.5).value for t in store.timeline())
    assert states.count(TicketState.QUEUED.value) == 3


@pytest.mark.parametrize("t_issue", [0.0, 0.3, 0.99, 1.0, 2.5])
def test_resolve_wait_virtual(tmp_path, t_issue):
    model = NetworkModel(request_latency_ms=500, startup_latency_ms=1000, bandwidth_bytes_per_s=50e6)
    clock = VirtualClock()
    store = WideAreaStore("w", tmp_path, model, clock, staging_model=INSTANT)
    k = key(5_000_000, "w")
    store.put(k, bytes(5_000_000))
    t_put = clock.now()
    assert t_put == pytest.approx(0.5)
    clock.advance(t_issue)
    t0 = clock.now()
    assert store.get(k) == bytes(5_000_000)
    expected = max(0.0, 1.0 + 0.1 - t_issue)
    assert clock.now() - t0 == pytest.approx(expected, abs=1e-9)


def test_wide_area_retries_then_fails(tmp_path):
    model = NetworkModel(startup_latency_ms=100)
    clock = VirtualClock()
    flaky = WideAreaStore("w", tmp_path / "a", model, clock, failure_rate=0.999999, max_retries=2, staging_model=INSTANT)
    k = key(3, "w")
    flaky.put(k, b"abc")
    with pytest.raises(TransferError):
        flaky.get(k)
    assert len([t for t in flaky.timeline() if t.key == k]) == 3


def test_wide_area_retry_recovers(tmp_path):
    model = NetworkModel(startup_latency_ms=100, rng_seed=3)
    clock = VirtualClock()
    store = WideAreaStore("w", tmp_path, model, clock, failure_rate=0.5, max_retries=20, staging_model=INSTANT)
    keys = [key(1, "w") for _ in range(20)]
    for k in keys:
        store.put(k, b"z")
    assert all(store.get(k) == b"z" for k in keys)
    assert len(store.timeline()) > 20


def test_memory_capacity(tmp_path):
    s = InMemoryStore("m", INSTANT, capacity_bytes=100)
    s.put(key(60, "m"), bytes(60))
    with pytest.raises(CapacityExceededError):
        s.put(key(60, "m"), bytes(60))


def test_not_found(tmp_path):
    for s in (InMemoryStore("m", INSTANT), FileSystemStore("f", tmp_path, INSTANT)):
        with pytest.raises(NotFoundError):
            s.get(key(1, s.store_id))


def test_filesystem_visible_across_instances(tmp_path):
    a = FileSystemStore("f", tmp_path, INSTANT)
    b = FileSystemStore("f", tmp_path, INSTANT)
    k = key(4, "f")
    a.put(k, b"data")
    assert b.get(k) == b"data"
    a.delete(k)
    assert not b.exists(k)


def test_network_model_delay_charged():
    clock = VirtualClock()
    s = InMemoryStore("m", NetworkModel(request_latency_ms=2, bandwidth_bytes_per_s=1e6), clock=clock)
    s.put(key(500_000, "m"), bytes(500_000))
    assert clock.now() == pytest.approx(0.002 + 0.5)


@pytest.mark.parametrize("kind", ["memory-kv", "wide-area"])
def test_remote_store_roundtrip(tmp_path, kind):
    net = {"request_latency_ms": 0, "startup_latency_ms": 0, "bandwidth_bytes_per_s": None}
    cfg = StoreConfig.from_dict({"store_id": "r", "kind": kind, "staging_dir": str(tmp_path), "network": net})
    server = StoreServer(build_backend(cfg), port=0)
    server.start()
    try:
        cfg.port = int(server.address.rsplit(":", 1)[1])
        client = connect(cfg)
        data = np.random.default_rng(0).bytes(300_000)
        k = key(len(data), "r")
        client.put(k, data)
        assert client.exists(k)
        assert client.get(k) == data
        assert client.stats().gets == 1
        client.delete(k)
        with pytest.raises(NotFoundError):
            client.get(k)
        client.close()
    finally:
        server.stop()


def test_registry_strict_and_permissive(tmp_path):
    from fedfabric.errors import StoreUnavailableError
    from fedfabric.refcore import proxy

    fs = FileSystemStore("f", tmp_path, INSTANT)
    ref = proxy(b"hello", fs)
    with pytest.raises(StoreUnavailableError):
        StoreRegistry({}).store_for(ref)
    assert StoreRegistry({}, permissive=True).store_for(ref).get(ref.object_key) == b"hello"


def test_store_config_defaults():
    cfg = StoreConfig.from_dict({"store_id": "w", "kind": "wide-area", "network": {"max_concurrent_transfers": 7}})
    assert cfg.kind is StoreKind.WIDE_AREA
    assert cfg.network.max_concurrent_transfers == 7
    assert cfg.network.startup_latency_ms == 1000.0
    assert StoreConfig.from_dict(cfg.to_dict()) == cfg
