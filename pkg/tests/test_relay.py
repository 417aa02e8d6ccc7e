import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfabric.clock import VirtualClock
from fedfabric.errors import AuthError, PayloadTooLargeError, UnknownFunctionError, UnknownTaskError
from fedfabric.refcore import TaskPayload
from fedfabric.relay import (
    RelayClient,
    RelayConfig,
    RelayCore,
    RelayServer,
    ResultEnvelope,
    Status,
    TaskDescriptor,
    Tier,
    TierPolicy,
    new_id,
)

ADMIN = "fedfabric-admin"


def sized_payload(total: int) -> TaskPayload:
    """A payload whose encoded form is exactly ``total`` bytes."""
    n = total
    for _ in range(8):
        p = TaskPayload.of(x=bytes(max(n, 0)))
        diff = len(p.to_bytes()) - total
        if diff == 0:
            return p
        n -= diff
    raise AssertionError(f"cannot build a {total} byte payload")


def make_core(lease_s=60.0):
    clock = VirtualClock()
    core = RelayCore(RelayConfig(lease_s=lease_s), clock=clock)
    fid = core.register_function("noop")
    token = core.pair("ep", ADMIN)
    return core, clock, fid, token


def task(fid, payload=None, client="c"):
    return TaskDescriptor(new_id(), fid, "ep", "t", payload or TaskPayload.of(a=b"1"), client_id=client)


@pytest.mark.parametrize("size,tier", [(0, Tier.FAST), (19_999, Tier.FAST), (20_000, Tier.BLOB), (10_000_000, Tier.BLOB)])
def test_tier_boundaries(size, tier):
    assert TierPolicy().tier_for(size) is tier


def test_submit_routes_exact_sizes():
    core, _, fid, _ = make_core()
    for size, tier in [(19_999, Tier.FAST), (20_000, Tier.BLOB), (10_000_000, Tier.BLOB)]:
        p = sized_payload(size)
        assert core.submit(task(fid, p))[1] is tier
    with pytest.raises(PayloadTooLargeError):
        core.submit(task(fid, sized_payload(10_000_001)))
    assert core.stats()["rejected"] == 1


def test_tier_latency_is_charged():
    core, clock, fid, _ = make_core()
    t0 = clock.now()
    core.submit(task(fid, sized_payload(1000)))
    assert clock.now() - t0 == pytest.approx(0.002 + 1000 / 200e6)
    t0 = clock.now()
    core.submit(task(fid, sized_payload(1_000_000)))
    assert clock.now() - t0 == pytest.approx(0.040 + 1_000_000 / 25e6)


def test_function_registry_is_idempotent():
    core = RelayCore(clock=VirtualClock())
    a = core.register_function("f", {"x": "1"})
    assert core.register_function("f", {"x": "1"}) == a
    assert core.register_function("f", {"x": "2"}) != a
    with pytest.raises(UnknownFunctionError):
        core.submit(TaskDescriptor(new_id(), "nope", "ep", "t", TaskPayload()))


def test_auth_required():
    core, _, fid, token = make_core()
    with pytest.raises(AuthError):
        core.pair("ep2", "wrong")
    with pytest.raises(AuthError):
        core.fetch_tasks("ep", "bad" + token, 1)
    with pytest.raises(AuthError):
        core.fetch_tasks("other", token, 1)


def test_fifo_delivery_and_params():
    core, _, _, token = make_core()
    fid = core.register_function("sleep", {"seconds": "0.5"})
    ids = [core.submit(task(fid))[0] for _ in range(5)]
    got = core.fetch_tasks("ep", token, 3) + core.fetch_tasks("ep", token, 10)
    assert [t.task_id for t in got] == ids
    assert got[0].function_name == "sleep" and got[0].function_params == {"seconds": "0.5"}
    assert got[0].payload == TaskPayload.of(a=b"1")


def test_lease_expiry_redelivers():
    core, clock, fid, token = make_core(lease_s=10)
    tid, _ = core.submit(task(fid))
    (first,) = core.fetch_tasks("ep", token, 1)
    assert core.fetch_tasks("ep", token, 1) == []
    clock.advance(10.5)
    (again,) = core.fetch_tasks("ep", token, 1)
    assert again.task_id == tid and again.delivery == 2
    assert core.stats()["redelivered"] == 1


def test_result_accepted_once():
    core, clock, fid, token = make_core(lease_s=1)
    tid, _ = core.submit(task(fid))
    core.fetch_tasks("ep", token, 1)
    clock.advance(2)
    core.fetch_tasks("ep", token, 1)
    env = ResultEnvelope(tid, Status.SUCCESS, TaskPayload.of(out=b"r"))
    assert core.post_result("ep", token, env) is False
    assert core.post_result("ep", token, env) is True
    raw = core.get_result(client_id="c")
    assert ResultEnvelope.from_bytes(raw).payload["out"] == b"r"
    assert core.get_result(client_id="c", timeout=0) is None
    s = core.stats()
    assert (s["completed"], s["delivered"], s["duplicate_results"]) == (1, 1, 1)


def test_result_for_undelivered_task_rejected():
    core, _, fid, token = make_core()
    tid, _ = core.submit(task(fid))
    with pytest.raises(UnknownTaskError):
        core.post_result("ep", token, ResultEnvelope(tid, Status.SUCCESS))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=30), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_every_task_delivered_exactly_once(batches, n_posters):
    core, _, fid, token = make_core()
    ids = {core.submit(task(fid))[0] for _ in range(sum(batches))}
    seen = []
    for b in batches:
        seen += [t.task_id for t in core.fetch_tasks("ep", token, b)]
    assert sorted(seen) == sorted(ids)

    def post(chunk):
        for tid in chunk:
            core.post_result("ep", token, ResultEnvelope(tid, Status.SUCCESS))

    # every poster posts every result; only the first may win
    threads = [threading.Thread(target=post, args=(seen,)) for _ in range(n_posters)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    got = []
    while (raw := core.get_result(client_id="c")) is not None:
        got.append(ResultEnvelope.from_bytes(raw).task_id)
    assert sorted(got) == sorted(ids)
    assert core.stats()["duplicate_results"] == len(ids) * (n_posters - 1)


def test_long_poll_wakes_on_submit():
    core = RelayCore(RelayConfig(tiers=TierPolicy()))
    fid = core.register_function("noop")
    token = core.pair("ep", ADMIN)
    timer = threading.Timer(0.1, lambda: core.submit(task(fid)))
    timer.start()
    got = core.fetch_tasks("ep", token, 1, timeout=5)
    timer.join()
    assert len(got) == 1


def test_socket_roundtrip():
    server = RelayServer(RelayConfig())
    server.start()
    try:
        client = RelayClient(server.address)
        client.wait_ready()
        fid = client.register_function("noop", {"k": "v"})
        token = client.pair("ep", ADMIN)
        tid, tier = client.submit(task(fid, TaskPayload.of(a=b"hello")))
        assert tier is Tier.FAST
        (t,) = client.fetch_tasks("ep", token, 4, timeout=1)
        assert TaskPayload.from_bytes(t.payload_bytes)["a"] == b"hello" and t.function_params == {"k": "v"}
        assert client.post_result("ep", token, ResultEnvelope(tid, Status.SUCCESS, TaskPayload.of(b=b"x"))) is False
        env = client.get_result(client_id="c", timeout=1)
        assert env is not None
        with pytest.raises(AuthError):
            client.fetch_tasks("ep", "nope", 1)
        est = client.clock_offset(rounds=4)
        assert est["rtt_ns"] >= 0
        client.close()
    finally:
        server.stop()
