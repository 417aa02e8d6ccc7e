import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedfabric.endpoint import Backoff, Endpoint, EndpointSpec, execute_task
from fedfabric.errors import AuthError, ConfigError
from fedfabric.refcore import NEVER_PROXY, ProxyPolicy, ProxyRule, Reference, ResolveCache, TaskPayload, proxy
from fedfabric.relay import RelayClient, RelayConfig, RelayServer, Status, TaskDescriptor, new_id
from fedfabric.stores import StoreRegistry
from fedfabric.tasks import default_implementations

IMPLS = default_implementations()
NO_PROXY = ProxyPolicy({}, NEVER_PROXY)


def desc(name, payload=None, params=None, raw=None):
    d = TaskDescriptor(new_id(), "f", "ep", "t", payload or TaskPayload(), function_name=name,
                       function_params=params or {})
    if raw is not None:
        d._payload_bytes = raw
    return d


def run(task, stores, policy=NO_PROXY, resource=None):
    return execute_task(task, IMPLS, ResolveCache(stores), policy, stores, "w0", "ep", resource_kind=resource)


def test_success_restores_references(instant_stores):
    ref = proxy(b"big" * 1000, instant_stores.store("kv"))
    env = run(desc("echo", TaskPayload.of({"seed": "1"}, a=ref, b=b"small")), instant_stores)
    assert env.status is Status.SUCCESS
    assert env.payload["a"] == b"big" * 1000 and env.payload["b"] == b"small"
    assert env.payload.metadata == {"seed": "1"}
    t = env.timings
    assert t.resolve_ms > 0
    assert t.parts_ms() <= t.time_on_worker_ms + 1e-6


def test_results_proxied_by_policy(instant_stores):
    policy = ProxyPolicy({"t": ProxyRule(100, "fs")})
    env = run(desc("echo", TaskPayload.of(a=b"x" * 500, b=b"y")), instant_stores, policy)
    assert isinstance(env.payload["a"], Reference) and env.payload["b"] == b"y"


def test_no_references_means_zero_resolve(instant_stores):
    env = run(desc("noop", TaskPayload.of(a=b"1")), instant_stores)
    assert env.status is Status.SUCCESS and env.timings.resolve_ms == 0.0


def test_task_error(instant_stores):
    env = run(desc("fail", params={"message": "boom"}), instant_stores)
    assert env.status is Status.TASK_ERROR and "boom" in env.message


@pytest.mark.parametrize(
    "task,resource",
    [
        (desc("no-such-builtin"), None),
        (desc("noop", raw=b"\xff\x00garbage"), None),
    ],
)
def test_infra_and_task_failures_do_not_raise(instant_stores, task, resource):
    env = run(task, instant_stores, resource=resource)
    assert env.status in (Status.INFRA_ERROR, Status.TASK_ERROR)
    assert env.task_id == task.task_id


def test_unknown_parameter_is_task_error(instant_stores):
    assert run(desc("noop", params={"bogus": "1"}), instant_stores).status is Status.TASK_ERROR


def test_resource_mismatch(instant_stores):
    gpu_task = next(name for name, impl in IMPLS.items() if impl.resource == "gpu")
    env = run(desc(gpu_task), instant_stores, resource="cpu")
    assert env.status is Status.INFRA_ERROR and "gpu" in env.message


def test_unreachable_store_is_infra_error(instant_stores):
    ref = proxy(b"z" * 100, instant_stores.store("kv"))
    env = run(desc("echo", TaskPayload.of(a=ref)), StoreRegistry({}))
    assert env.status is Status.INFRA_ERROR


@given(st.floats(0.01, 5), st.floats(0.1, 100))
def test_backoff_doubles_to_cap(base, cap):
    b = Backoff(base, cap)
    delays = [b.next() for _ in range(20)]
    assert delays[0] == min(base, cap)
    assert all(d2 == min(cap, 2 * d1) for d1, d2 in zip(delays, delays[1:]))
    b.reset()
    assert b.next() == delays[0]


def test_spec_validation():
    with pytest.raises(ConfigError):
        EndpointSpec("e", worker_slots=0)
    with pytest.raises(ConfigError):
        EndpointSpec("e", resource_kind="tpu")


@pytest.fixture
def relay():
    server = RelayServer(RelayConfig())
    server.start()
    yield server
    server.stop()


def test_worker_pool_runs_slots_in_parallel(relay):
    client = RelayClient(relay.address)
    fid = client.register_function("sleep", {"duration_s": "0.3"})
    token = client.pair("ep", "fedfabric-admin")
    ep = Endpoint(EndpointSpec("ep", worker_slots=3, pairing_token=token), relay.address, fetch_timeout=0.1)
    ep.start()
    t0 = time.monotonic()
    ids = {client.submit(TaskDescriptor(new_id(), fid, "ep", "t", TaskPayload(), client_id="c"))[0] for _ in range(9)}
    got = set()
    while len(got) < 9:
        env = client.get_result(client_id="c", timeout=5)
        assert env is not None
        assert env.status is Status.SUCCESS
        got.add(env.task_id)
    elapsed = time.monotonic() - t0
    ep.stop()
    client.close()
    assert got == ids
    assert ep.max_running == 3
    # three waves of 0.3 s
    assert 0.85 < elapsed < 2.0


def test_stop_drains_fetched_tasks(relay):
    client = RelayClient(relay.address)
    fid = client.register_function("sleep", {"duration_s": "0.2"})
    token = client.pair("ep", "fedfabric-admin")
    ep = Endpoint(EndpointSpec("ep", worker_slots=2, pairing_token=token), relay.address, fetch_timeout=0.1)
    ep.start()
    for _ in range(2):
        client.submit(TaskDescriptor(new_id(), fid, "ep", "t", TaskPayload(), client_id="c"))
    deadline = time.monotonic() + 5
    while ep.idle() and time.monotonic() < deadline:
        time.sleep(0.01)
    ep.stop()
    assert ep.executed == ep.posted == 2
    assert client.stats()["completed"] == 2
    client.close()


def test_bad_token_is_fatal(relay):
    ep = Endpoint(EndpointSpec("ep", pairing_token="wrong"), relay.address, fetch_timeout=0.1)
    ep.start()
    deadline = time.monotonic() + 5
    while ep.fatal is None and time.monotonic() < deadline:
        time.sleep(0.01)
    ep.stop()
    assert isinstance(ep.fatal, AuthError)
