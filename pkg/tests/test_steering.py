import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfabric.errors import ConfigError
from fedfabric.refcore import TaskPayload
from fedfabric.relay import Status, WorkerTimings
from fedfabric.steering import (
    AgentError,
    AgentSpec,
    PrioritizedTaskQueue,
    ResourceCounter,
    Result,
    RetrainTrigger,
    SimulationState,
    SteeringPolicy,
    Thinker,
    next_simulation_decision,
    retrain_gate,
)

score_maps = st.dictionaries(st.integers(0, 500), st.floats(-5, 5, allow_nan=False), max_size=60)


def oracle_order(scores):
    return [cid for cid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


@given(score_maps)
def test_queue_pops_in_oracle_order(scores):
    q = PrioritizedTaskQueue()
    for cid, s in scores.items():
        q.push(cid, s)
    assert q.order() == oracle_order(scores)
    popped = [q.pop() for _ in range(len(scores))]
    assert popped == oracle_order(scores)
    assert q.pop() is None


@given(score_maps, st.dictionaries(st.integers(0, 500), st.floats(-5, 5, allow_nan=False)))
def test_reprioritize_matches_oracle(scores, update):
    q = PrioritizedTaskQueue(scores)
    q.reprioritize(update)
    merged = {cid: update.get(cid, s) for cid, s in scores.items()}
    assert q.order() == oracle_order(merged)
    assert set(q.ids()) == set(scores)


def test_duplicate_push_rejected():
    q = PrioritizedTaskQueue({1: 0.0})
    with pytest.raises(KeyError):
        q.push(1, 2.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pop_and_reprioritize_are_linearizable(seed):
    import numpy as np

    rng = np.random.default_rng(seed)
    n = 300
    a = {i: float(v) for i, v in enumerate(rng.random(n))}
    b = {i: float(v) for i, v in enumerate(rng.random(n))}
    q = PrioritizedTaskQueue(a)
    popped = []
    go = threading.Event()

    def popper():
        go.wait()
        for _ in range(n // 2):
            popped.append(q.pop())

    th = threading.Thread(target=popper)
    th.start()
    go.set()
    q.reprioritize(b)
    th.join()
    # some prefix follows the old order, the rest follows the new order over what was left
    order_a = oracle_order(a)
    ok = False
    for k in range(len(popped) + 1):
        if popped[:k] != order_a[:k]:
            break
        left = {c: b[c] for c in a if c not in set(popped[:k])}
        if popped[k:] == oracle_order(left)[: len(popped) - k]:
            ok = True
            break
    assert ok
    assert sorted(popped + q.order()) == list(range(n))


@pytest.mark.parametrize(
    "trigger,n,new,expected",
    [
        ("every_n", 25, 24, False),
        ("every_n", 25, 25, True),
        ("batch_pause", 10, 10, True),
        ("batch_pause", 10, 3, False),
        ("continuous", 25, 0, False),
        ("continuous", 25, 1, True),
    ],
)
def test_retrain_gate(trigger, n, new, expected):
    assert retrain_gate(SteeringPolicy(retrain_trigger=trigger, retrain_n=n), new) is expected


def test_policy_validation_and_from_dict():
    with pytest.raises(ConfigError):
        SteeringPolicy(simulation_backlog_k=-1)
    with pytest.raises(ConfigError):
        SteeringPolicy(ensemble_size=0)
    p = SteeringPolicy.from_dict({"retrain_trigger": "batch_pause", "proxy": {"topics": {"x": {"threshold_bytes": 5, "store_id": "kv"}}}})
    assert p.retrain_trigger is RetrainTrigger.BATCH_PAUSE and p.pauses_refill
    assert p.proxy.rule_for("x").should_proxy(6)


def test_resource_counter():
    rc = ResourceCounter({"cpu": 2})
    assert rc.try_acquire("cpu") and rc.try_acquire("cpu")
    assert not rc.try_acquire("cpu")
    assert not rc.acquire("cpu", timeout=0.05)
    threading.Timer(0.05, rc.release, args=("cpu",)).start()
    assert rc.acquire("cpu", timeout=2)
    rc.release("cpu", 2)
    with pytest.raises(RuntimeError):
        rc.release("cpu")
    ok, v = rc.wait_change("cpu", rc.version, 0.01)
    assert not ok
    ok, _ = rc.wait_change("cpu", v - 1, 0.01)
    assert ok
    assert not rc.try_acquire("gpu")


class RecordingLog:
    def __init__(self):
        self.records = []

    def record(self, task_id, topic, stage, t_ns=None, **extra):
        self.records.append((task_id, stage, extra.get("detail")))


def fake_result(tid):
    return Result(tid, "simulate", Status.SUCCESS, TaskPayload(), WorkerTimings(), "w", "", 0)


def make_sim_state(n=10, slots=3, k=1):
    q = PrioritizedTaskQueue({i: float(n - i) for i in range(n)})
    submitted = []

    def submit(cand, on_sent):
        submitted.append(cand)
        on_sent(time.time_ns())
        return f"t{cand}"

    return SimulationState(q, slots, k, submit), submitted


def test_decision_fills_to_target_in_priority_order():
    state, submitted = make_sim_state()
    assert next_simulation_decision(state, None) == ["t0", "t1", "t2", "t3"]
    assert state.in_flight == 4 and submitted == [0, 1, 2, 3]


def test_completion_refills_one_and_logs():
    state, submitted = make_sim_state()
    next_simulation_decision(state, None)
    log = RecordingLog()
    assert next_simulation_decision(state, fake_result("t0"), log) == ["t4"]
    assert [r[1] for r in log.records] == ["decision_made", "next_submitted"]
    assert all(r[0] == "t0" and r[2] == "t4" for r in log.records)
    assert state.in_flight == 4


def test_pause_and_exhaustion():
    state, _ = make_sim_state(n=5)
    next_simulation_decision(state, None)
    state.paused = True
    assert next_simulation_decision(state, fake_result("t0")) == []
    assert state.in_flight == 3
    state.paused = False
    assert next_simulation_decision(state, fake_result("t1")) == ["t4"]
    assert next_simulation_decision(state, fake_result("t2")) == []


def test_zero_backlog():
    state, _ = make_sim_state(k=0)
    assert len(next_simulation_decision(state, None)) == 3


def test_agent_spec_validation():
    with pytest.raises(ConfigError):
        AgentSpec("a", "on_result", lambda t, r: None)
    with pytest.raises(ConfigError):
        AgentSpec.on_timer("a", 0, lambda t: None)
    with pytest.raises(ConfigError):
        AgentSpec("a", "on_resource_free", lambda t, r: None)


class FakeServer:
    events = RecordingLog()

    def get_result(self, topic, timeout=None):
        time.sleep(timeout or 0)
        return None

    def wait_drained(self, timeout):
        return True

    def outstanding(self, topic=None):
        return 0


def test_thinker_runs_timers_and_stops():
    ticks = []

    def tick(th):
        ticks.append(1)
        if len(ticks) == 3:
            th.stop()

    th = Thinker([AgentSpec.on_timer("t", 0.01, tick)], SteeringPolicy(), FakeServer())
    th.run(timeout=5)
    assert len(ticks) == 3


def test_thinker_surfaces_agent_errors():
    def boom(th):
        raise ValueError("bad")

    waited = []

    def waiter(th):
        th.done.wait(5)
        waited.append(True)

    th = Thinker([AgentSpec.on_start("boom", boom), AgentSpec.on_start("w", waiter)], SteeringPolicy(), FakeServer())
    with pytest.raises(AgentError) as info:
        th.run(timeout=5)
    assert info.value.agent == "boom" and waited == [True]


def test_resource_agent_fires_on_release():
    rc = ResourceCounter({"cpu": 1})
    fired = []

    def on_free(th, kind):
        if rc.try_acquire(kind):
            fired.append(kind)
            if len(fired) == 2:
                th.stop()
            else:
                threading.Timer(0.02, rc.release, args=(kind,)).start()

    th = Thinker([AgentSpec.on_resource_free("r", "cpu", on_free)], SteeringPolicy(), FakeServer(), rc)
    th.run(timeout=5)
    assert fired == ["cpu", "cpu"]


@pytest.fixture
def fabric(tmp_path):
    from fedfabric.endpoint import Endpoint, EndpointSpec
    from fedfabric.refcore import ProxyPolicy, ProxyRule
    from fedfabric.relay import RelayConfig, RelayServer
    from fedfabric.steering import TaskServer, TopicSpec
    from fedfabric.stores import StoreRegistry, build_backend
    from fedfabric.stores.model import StoreConfig

    fs_cfg = StoreConfig.from_dict({"store_id": "fs", "kind": "filesystem", "root": str(tmp_path / "fs")})
    relay = RelayServer(RelayConfig())
    relay.start()
    token = relay.core.pair("ep", relay.core.config.admin_token)
    spec = EndpointSpec("ep", worker_slots=2, store_bindings={"fs": fs_cfg}, pairing_token=token,
                        result_policy=ProxyPolicy({"echo": ProxyRule(1000, "fs")}))
    ep = Endpoint(spec, relay.address, fetch_timeout=0.1)
    ep.start()
    registry = StoreRegistry({"fs": build_backend(fs_cfg)})
    ts = TaskServer(relay.address, [TopicSpec("echo", "echo", "ep")], ProxyPolicy({"echo": ProxyRule(1000, "fs")}),
                    registry, RecordingLog(), poll_s=0.1).start()
    yield ts, registry.store("fs")
    ts.close()
    ep.stop()
    relay.stop()


def test_task_server_round_trip_with_proxies(fabric):
    ts, fs = fabric
    big = bytes(range(256)) * 40
    tid = ts.submit_task("echo", TaskPayload.of({"seed": "3"}, big=big, small=b"s"))
    res = ts.get_result("echo", timeout=10)
    assert res is not None and res.task_id == tid and res.success
    assert res.metadata == {"seed": "3"}
    gets = fs.stats().gets
    assert ts.resolve(res) == {"big": big, "small": b"s"}
    assert fs.stats().gets == gets + 1
    # the cached copy serves a second resolve
    ts.resolve(res)
    assert fs.stats().gets == gets + 1
    assert ts.wait_drained(1) and ts.outstanding() == 0


def test_task_server_pause_holds_results(fabric):
    ts, _ = fabric
    ts.pause_results(0.6)
    ts.submit_task("echo", TaskPayload.of(a=b"1"))
    assert ts.get_result("echo", timeout=0.3) is None
    assert ts.get_result("echo", timeout=5) is not None


def test_unknown_topic_rejected(fabric):
    ts, _ = fabric
    with pytest.raises(ConfigError):
        ts.submit_task("nope", TaskPayload())


def test_resolve_counts_are_per_thread(fabric):
    ts, _ = fabric
    ts.submit_task("echo", TaskPayload.of(a=b"1"))
    res = ts.get_result("echo", timeout=10)
    other = threading.Thread(target=ts.resolve, args=(res,))
    other.start()
    other.join()
    assert ts.resolves == 1 and ts.thread_resolves() == 0
    ts.resolve(res)
    assert ts.resolves == 2 and ts.thread_resolves() == 1
