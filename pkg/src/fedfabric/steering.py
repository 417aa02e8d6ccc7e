"""Thinker and task server: event-driven agents over shared state, a client
that submits topic-tagged tasks through the relay, and the policy knobs that
hide data-movement latency.
"""

from __future__ import annotations

import bisect
import collections
import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable

from .bench.events import NullLog
from .clock import now_ns
from .endpoint import Backoff
from .errors import ConfigError, FabricError, RelayUnavailableError, SubmissionError
from .refcore import NEVER_PROXY, ProxyPolicy, ResolveCache, TaskPayload, restore, scan_and_proxy
from .relay.protocol import ResultEnvelope, Status, TaskDescriptor, WorkerTimings, new_id
from .relay.server import RelayClient
from .stores import StoreRegistry

log = logging.getLogger(__name__)


# -- policy ------------------------------------------------------------------


class RetrainTrigger(str, enum.Enum):
    CONTINUOUS = "continuous"
    EVERY_N = "every_n"
    BATCH_PAUSE = "batch_pause"


@dataclass
class SteeringPolicy:
    retrain_trigger: RetrainTrigger = RetrainTrigger.EVERY_N
    retrain_n: int = 25
    simulation_backlog_k: int = 1
    inference_chunk_size: int = 500
    ensemble_size: int = 8
    proxy: ProxyPolicy = field(default_factory=lambda: ProxyPolicy({}, NEVER_PROXY))

    def __post_init__(self):
        self.retrain_trigger = RetrainTrigger(self.retrain_trigger)
        if self.simulation_backlog_k < 0:
            raise ConfigError("simulation_backlog_k must be >= 0")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if self.retrain_n < 1:
            raise ConfigError("retrain_n must be >= 1")
        if self.inference_chunk_size < 1:
            raise ConfigError("inference_chunk_size must be >= 1")

    @property
    def pauses_refill(self) -> bool:
        return self.retrain_trigger is RetrainTrigger.BATCH_PAUSE

    @classmethod
    def from_dict(cls, d: dict | None) -> "SteeringPolicy":
        d = dict(d or {})
        proxy = ProxyPolicy.from_dict(d.pop("proxy", {}))
        return cls(proxy=proxy, **d)


def retrain_gate(policy: SteeringPolicy, new_results_since_last_train: int) -> bool:
    """Whether enough new results have arrived to start another training round."""
    if policy.retrain_trigger is RetrainTrigger.CONTINUOUS:
        return new_results_since_last_train >= 1
    return new_results_since_last_train >= policy.retrain_n


# -- candidate queue -----------------------------------------------------------


class PrioritizedTaskQueue:
    """Candidates ordered by descending score, ties by ascending id.

    ``pop`` and ``reprioritize`` share one lock, so a pop sees either the old
    or the new order in full.
    """

    def __init__(self, scores: dict[Hashable, float] | None = None):
        self._lock = threading.Lock()
        self._scores: dict[Hashable, float] = dict(scores or {})
        self._order: list = []  # ascending priority; head at the end
        self.generation = 0
        self._rebuild()

    @staticmethod
    def _key(item):
        cid, score = item
        return (score, _Desc(cid))

    def _rebuild(self) -> None:
        self._order = sorted(self._scores.items(), key=self._key)

    def push(self, cid: Hashable, score: float = 0.0) -> None:
        with self._lock:
            if cid in self._scores:
                raise KeyError(f"candidate {cid!r} already queued")
            self._scores[cid] = score
            bisect.insort(self._order, (cid, score), key=self._key)

    def pop(self) -> Hashable | None:
        with self._lock:
            if not self._order:
                return None
            cid, _ = self._order.pop()
            del self._scores[cid]
            return cid

    def reprioritize(self, scores: dict[Hashable, float]) -> int:
        with self._lock:
            for cid in self._scores:
                if cid in scores:
                    self._scores[cid] = float(scores[cid])
            self._rebuild()
            self.generation += 1
            return self.generation

    def order(self) -> list:
        with self._lock:
            return [cid for cid, _ in reversed(self._order)]

    def ids(self) -> list:
        with self._lock:
            return list(self._scores)

    def __len__(self) -> int:
        with self._lock:
            return len(self._order)

    def __contains__(self, cid) -> bool:
        with self._lock:
            return cid in self._scores


class _Desc:
    """Inverts comparison so ascending-sorted lists put smaller ids last."""

    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __lt__(self, other):
        return other.v < self.v

    def __eq__(self, other):
        return self.v == other.v


def reprioritize(queue_: PrioritizedTaskQueue, scores: dict[Hashable, float]) -> int:
    return queue_.reprioritize(scores)


# -- resources -------------------------------------------------------------------


class ResourceCounter:
    """Free-slot counts per resource kind, as the Thinker sees them."""

    def __init__(self, slots: dict[str, int]):
        self._total = dict(slots)
        self._free = dict(slots)
        self._cond = threading.Condition()
        self.version = 0  # bumps on every acquire/release

    def total(self, kind: str) -> int:
        return self._total.get(kind, 0)

    def available(self, kind: str) -> int:
        with self._cond:
            return self._free.get(kind, 0)

    def acquire(self, kind: str, n: int = 1, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._free.get(kind, 0) < n:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(remaining)
            self._free[kind] -= n
            self.version += 1
            return True

    def try_acquire(self, kind: str, n: int = 1) -> bool:
        return self.acquire(kind, n, timeout=0)

    def release(self, kind: str, n: int = 1) -> None:
        with self._cond:
            self._free[kind] = self._free.get(kind, 0) + n
            if self._free[kind] > self._total.get(kind, 0):
                raise RuntimeError(f"released more {kind} slots than exist")
            self.version += 1
            self._cond.notify_all()

    def wait_change(self, kind: str, seen_version: int, timeout: float) -> tuple[bool, int]:
        """Wait until ``kind`` has a free slot and state moved past ``seen_version``."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while not (self._free.get(kind, 0) > 0 and self.version != seen_version):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False, self.version
                self._cond.wait(remaining)
            return True, self.version


# -- task server -----------------------------------------------------------------


@dataclass(frozen=True)
class TopicSpec:
    name: str
    function: str  # builtin implementation name
    endpoint_id: str
    params: dict[str, str] = field(default_factory=dict)
    resource: str = "cpu"


@dataclass
class Result:
    task_id: str
    topic: str
    status: Status
    payload: TaskPayload
    timings: WorkerTimings
    worker_id: str
    message: str
    received_ns: int

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS

    @property
    def metadata(self) -> dict[str, str]:
        return self.payload.metadata


@dataclass
class _Pending:
    desc: TaskDescriptor
    done: threading.Event = field(default_factory=threading.Event)
    error: BaseException | None = None
    sent_to_server_ns: int = 0


class TaskServer:
    """Client side of the fabric: proxies, serializes and submits tasks, and
    routes results into per-topic queues."""

    def __init__(
        self,
        relay_address: str,
        topics: Iterable[TopicSpec],
        proxy_policy: ProxyPolicy | None = None,
        registry: StoreRegistry | None = None,
        events=None,
        client_id: str | None = None,
        channel_size: int = 64,
        cache_bytes: int | None = None,
        retry_s: float = 30.0,
        poll_s: float = 0.25,
    ):
        self.topics = {t.name: t for t in topics}
        self.policy = proxy_policy or ProxyPolicy({}, NEVER_PROXY)
        self.registry = registry or StoreRegistry()
        self.cache = ResolveCache(self.registry) if cache_bytes is None else ResolveCache(self.registry, cache_bytes)
        self.events = events or NullLog()
        self.client_id = client_id or new_id()
        self.retry_s = retry_s
        self.poll_s = poll_s
        self.client = RelayClient(relay_address)
        self._function_ids: dict[str, str] = {}
        self._channel: queue.Queue[_Pending | None] = queue.Queue(maxsize=channel_size)
        self._queues: dict[str, queue.Queue[Result]] = collections.defaultdict(queue.Queue)
        self._lock = threading.Lock()
        self._outstanding: dict[str, str] = {}  # task id -> topic
        self._drained = threading.Condition(self._lock)
        self._seen: set[str] = set()
        self.duplicates_received = 0
        self.resolves = 0
        self._resolves_here = threading.local()
        self.received = collections.Counter()
        self._paused_until = 0.0
        self._pause_ack = threading.Event()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> "TaskServer":
        for spec in self.topics.values():
            self._function_ids[spec.name] = self._retry(
                lambda s=spec: self.client.register_function(s.function, s.params)
            )
        self._threads = [
            threading.Thread(target=self._sender, name="ts-sender", daemon=True),
            threading.Thread(target=self._listener, name="ts-listener", daemon=True),
        ]
        for t in self._threads:
            t.start()
        return self

    def close(self) -> None:
        self._stop.set()
        self._channel.put(None)
        for t in self._threads:
            t.join(5)
        self.client.close()

    def _retry(self, fn):
        deadline = time.monotonic() + self.retry_s
        backoff = Backoff()
        while True:
            try:
                return fn()
            except RelayUnavailableError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(backoff.next())

    # -- submission ------------------------------------------------------------
    def submit_task(
        self, topic: str, inputs: TaskPayload, endpoint_id: str | None = None, on_sent: Callable[[int], None] | None = None
    ) -> str:
        """Proxy, serialize and submit; blocks until the relay acknowledges."""
        spec = self.topics.get(topic)
        if spec is None:
            raise ConfigError(f"unknown topic {topic!r}")
        task_id = new_id()
        self.events.record(task_id, topic, "created")
        try:
            proxied = scan_and_proxy(inputs, self.policy, topic, self.registry)
        except FabricError as exc:
            raise SubmissionError(topic, exc) from exc
        desc = TaskDescriptor(
            task_id=task_id,
            function_id=self._function_ids[topic],
            endpoint_id=endpoint_id or spec.endpoint_id,
            topic=topic,
            payload=proxied,
            client_id=self.client_id,
        )
        desc.payload_bytes  # serialize now, inside the timed span
        self.events.record(task_id, topic, "serialized")
        with self._lock:
            self._outstanding[task_id] = topic
        pending = _Pending(desc)
        self._channel.put(pending)
        pending.done.wait()
        if pending.error is not None:
            with self._drained:
                self._outstanding.pop(task_id, None)
                self._drained.notify_all()
            raise SubmissionError(topic, pending.error) from pending.error
        if on_sent is not None:
            on_sent(pending.sent_to_server_ns)
        return task_id

    def _sender(self) -> None:
        while True:
            item = self._channel.get()
            if item is None:
                return
            desc = item.desc
            item.sent_to_server_ns = now_ns()
            self.events.record(desc.task_id, desc.topic, "sent_to_server", item.sent_to_server_ns)
            t_send = now_ns()  # stamped at transmission: the relay may hand it out before it acks
            try:
                self._retry(lambda: self.client.submit(desc))
                self.events.record(desc.task_id, desc.topic, "sent_to_relay", t_send)
            except Exception as exc:
                item.error = exc
            item.done.set()

    # -- results ---------------------------------------------------------------
    def pause_results(self, seconds: float) -> None:
        """Stop collecting results for a while, as if the client went offline."""
        self._pause_ack.clear()
        self._paused_until = time.monotonic() + seconds
        # a long-poll already in progress may still deliver; wait it out
        self._pause_ack.wait(self.poll_s + 5.0)

    def _listener(self) -> None:
        backoff = Backoff()
        while not self._stop.is_set():
            if time.monotonic() < self._paused_until:
                self._pause_ack.set()
                time.sleep(0.02)
                continue
            try:
                env = self.client.get_result(client_id=self.client_id, timeout=self.poll_s)
                backoff.reset()
            except RelayUnavailableError:
                self._stop.wait(backoff.next())
                continue
            if env is not None:
                self._deliver(env)

    def _deliver(self, env: ResultEnvelope) -> None:
        t = now_ns()
        with self._drained:
            if env.task_id in self._seen:
                self.duplicates_received += 1
                return
            self._seen.add(env.task_id)
            topic = self._outstanding.pop(env.task_id, env.topic)
            self.received[topic] += 1
            self._drained.notify_all()
        self.events.record(env.task_id, topic, "result_received", t, worker_id=env.worker_id or None)
        self._queues[topic].put(
            Result(env.task_id, topic, env.status, env.payload, env.timings, env.worker_id, env.message, t)
        )

    def get_result(self, topic: str, timeout: float | None = None) -> Result | None:
        try:
            return self._queues[topic].get(timeout=timeout)
        except queue.Empty:
            return None

    def resolve(self, result: Result) -> dict[str, bytes]:
        """Materialize a result's fields; the first call records data_resolved."""
        with self._lock:
            self.resolves += 1
        self._resolves_here.n = self.thread_resolves() + 1
        data = restore(result.payload, self.cache).as_dict()
        self.events.record(result.task_id, result.topic, "data_resolved")
        return data

    def thread_resolves(self) -> int:
        """Resolves issued so far by the calling thread."""
        return getattr(self._resolves_here, "n", 0)

    def outstanding(self, topic: str | None = None) -> int:
        with self._lock:
            if topic is None:
                return len(self._outstanding)
            return sum(1 for t in self._outstanding.values() if t == topic)

    def wait_drained(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._drained:
            while self._outstanding:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._drained.wait(remaining)
            return True


# -- thinker ---------------------------------------------------------------------


class Trigger(str, enum.Enum):
    ON_START = "on_start"
    ON_RESULT = "on_result"
    ON_RESOURCE_FREE = "on_resource_free"
    ON_TIMER = "on_timer"


@dataclass(frozen=True)
class AgentSpec:
    name: str
    trigger: Trigger
    handler: Callable[..., Any]
    topic: str | None = None
    resource: str | None = None
    period_s: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "trigger", Trigger(self.trigger))
        if self.trigger is Trigger.ON_RESULT and not self.topic:
            raise ConfigError(f"agent {self.name}: on_result needs a topic")
        if self.trigger is Trigger.ON_RESOURCE_FREE and not self.resource:
            raise ConfigError(f"agent {self.name}: on_resource_free needs a resource kind")
        if self.trigger is Trigger.ON_TIMER and not (self.period_s and self.period_s > 0):
            raise ConfigError(f"agent {self.name}: on_timer needs a positive period")

    @classmethod
    def on_start(cls, name, handler):
        return cls(name, Trigger.ON_START, handler)

    @classmethod
    def on_result(cls, name, topic, handler):
        return cls(name, Trigger.ON_RESULT, handler, topic=topic)

    @classmethod
    def on_resource_free(cls, name, resource, handler):
        return cls(name, Trigger.ON_RESOURCE_FREE, handler, resource=resource)

    @classmethod
    def on_timer(cls, name, period_s, handler):
        return cls(name, Trigger.ON_TIMER, handler, period_s=period_s)


class AgentError(FabricError):
    def __init__(self, agent: str, cause: BaseException):
        super().__init__(f"agent {agent} failed: {cause!r}")
        self.agent = agent
        self.cause = cause


class Thinker:
    """Runs agents as threads over shared state guarded by ``lock``.

    Any handler exception stops every agent, drains outstanding tasks and is
    re-raised from :meth:`run` as :class:`AgentError`.
    """

    def __init__(
        self,
        agents: list[AgentSpec],
        policy: SteeringPolicy,
        task_server: TaskServer,
        resources: ResourceCounter | None = None,
        state: Any = None,
        events=None,
    ):
        names = [a.name for a in agents]
        if len(set(names)) != len(names):
            raise ConfigError("agent names must be unique")
        self.agents = agents
        self.policy = policy
        self.task_server = task_server
        self.resources = resources or ResourceCounter({})
        self.state = state
        self.events = events or task_server.events
        self.lock = threading.RLock()
        self.done = threading.Event()
        self.error: AgentError | None = None
        self._threads: list[threading.Thread] = []

    def stop(self) -> None:
        self.done.set()

    def _guard(self, agent: AgentSpec, *args) -> None:
        try:
            agent.handler(self, *args)
        except Exception as exc:
            log.exception("agent %s raised", agent.name)
            if self.error is None:
                self.error = AgentError(agent.name, exc)
            self.done.set()

    def _run_agent(self, agent: AgentSpec) -> None:
        if agent.trigger is Trigger.ON_START:
            self._guard(agent)
        elif agent.trigger is Trigger.ON_RESULT:
            while not self.done.is_set():
                res = self.task_server.get_result(agent.topic, timeout=0.05)
                if res is not None:
                    self._guard(agent, res)
        elif agent.trigger is Trigger.ON_RESOURCE_FREE:
            seen = -1
            while not self.done.is_set():
                ok, version = self.resources.wait_change(agent.resource, seen, 0.05)
                if ok:
                    self._guard(agent, agent.resource)
                    seen = version
        else:
            next_t = time.monotonic() + agent.period_s
            while not self.done.wait(max(0.0, next_t - time.monotonic())):
                self._guard(agent)
                next_t += agent.period_s

    def run(self, timeout: float | None = None, drain_timeout: float = 120.0) -> None:
        self._threads = [
            threading.Thread(target=self._run_agent, args=(a,), name=f"agent-{a.name}", daemon=True)
            for a in self.agents
        ]
        for t in self._threads:
            t.start()
        self.done.wait(timeout)
        self.done.set()
        for t in self._threads:
            t.join(drain_timeout)
        if not self.task_server.wait_drained(drain_timeout):
            log.warning("%d tasks still outstanding after drain", self.task_server.outstanding())
        if self.error is not None:
            raise self.error


def run_thinker(
    agents: list[AgentSpec],
    policy: SteeringPolicy,
    task_server: TaskServer,
    resources: ResourceCounter | None = None,
    state: Any = None,
    timeout: float | None = None,
) -> Thinker:
    thinker = Thinker(agents, policy, task_server, resources, state)
    thinker.run(timeout)
    return thinker


# -- simulation chaining ------------------------------------------------------------


@dataclass
class SimulationState:
    """What the chaining decision needs: the ranked queue and the in-flight target."""

    queue: PrioritizedTaskQueue
    cpu_slots: int
    backlog_k: int
    submit: Callable[[Hashable, Callable[[int], None]], str]  # (candidate, on_sent) -> task id
    in_flight: int = 0
    paused: bool = False

    @property
    def target(self) -> int:
        return self.cpu_slots + self.backlog_k


def next_simulation_decision(
    state: SimulationState, completed: Result | None, events=None, topic: str = "simulate"
) -> list[str]:
    """Refill the simulation pipeline to its target depth.

    Reads only the result envelope, never its payload, so no store traffic.
    Returns the ids of newly submitted tasks.
    """
    events = events or NullLog()
    if completed is not None:
        state.in_flight -= 1
    new_ids: list[str] = []
    while not state.paused and state.in_flight < state.target:
        cand = state.queue.pop()
        if cand is None:
            log.info("candidate queue empty; nothing to submit")
            break
        t_decide = now_ns()
        sent: list[int] = []
        task_id = state.submit(cand, sent.append)
        state.in_flight += 1
        new_ids.append(task_id)
        if completed is not None and not new_ids[:-1]:
            events.record(completed.task_id, completed.topic, "decision_made", t_decide, detail=task_id)
            events.record(completed.task_id, completed.topic, "next_submitted", sent[0] if sent else now_ns(), detail=task_id)
    return new_ids
