"""Site-resident endpoint: fetches tasks from the relay and runs them on a
local pool of worker threads.

The endpoint only ever dials out.  A fetch loop pulls at most as many tasks as
there are free slots, workers restore proxied inputs and run the registered
implementation, and a poster thread returns results.
"""

from __future__ import annotations

import json
import logging
import queue
import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bench.events import EventLog, NullLog
from .clock import now_ns
from .errors import AuthError, ConfigError, FabricError, RelayUnavailableError, UnknownTaskError
from .refcore import (
    DEFAULT_CACHE_BYTES,
    NEVER_PROXY,
    ProxyPolicy,
    ResolveCache,
    TaskPayload,
    restore,
    scan_and_proxy,
)
from .relay.protocol import ResultEnvelope, Status, TaskDescriptor, WorkerTimings
from .relay.server import RelayClient
from .stores import StoreRegistry, connect
from .stores.model import StoreConfig
from .tasks import TaskContext, TaskImplementation, default_implementations

log = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.2
BACKOFF_CAP_S = 10.0


@dataclass
class EndpointSpec:
    endpoint_id: str
    site_name: str = ""
    resource_kind: str = "cpu"
    worker_slots: int = 1
    store_bindings: dict[str, StoreConfig] = field(default_factory=dict)
    shared_fs_sites: frozenset[str] = frozenset()
    pairing_token: str = ""
    result_policy: ProxyPolicy = field(default_factory=lambda: ProxyPolicy({}, NEVER_PROXY))
    cache_bytes: int = DEFAULT_CACHE_BYTES

    def __post_init__(self):
        if self.worker_slots < 1:
            raise ConfigError(f"endpoint {self.endpoint_id}: worker_slots must be >= 1")
        if self.resource_kind not in ("cpu", "gpu"):
            raise ConfigError(f"endpoint {self.endpoint_id}: unknown resource kind {self.resource_kind!r}")
        self.shared_fs_sites = frozenset(self.shared_fs_sites)

    def registry(self) -> StoreRegistry:
        return StoreRegistry({sid: connect(cfg) for sid, cfg in self.store_bindings.items()})


class Backoff:
    """Exponential retry delay: base, 2*base, ... capped."""

    def __init__(self, base: float = BACKOFF_BASE_S, cap: float = BACKOFF_CAP_S):
        self.base, self.cap = base, cap
        self.attempt = 0

    def next(self) -> float:
        delay = min(self.cap, self.base * (2**self.attempt))
        self.attempt += 1
        return delay

    def reset(self) -> None:
        self.attempt = 0


def _ms(t0: int, t1: int) -> float:
    return (t1 - t0) / 1e6


def execute_task(
    task: TaskDescriptor,
    impl_registry: dict[str, TaskImplementation],
    cache: ResolveCache,
    result_policy: ProxyPolicy,
    registry: StoreRegistry,
    worker_id: str = "",
    endpoint_id: str = "",
    events=None,
    resource_kind: str | None = None,
) -> ResultEnvelope:
    """Run one task and package its result.

    Phases (deserialize, resolve, execute, serialize) are timed back to back
    so their sum never exceeds the time on worker.
    """
    events = events or NullLog()
    tid, topic = task.task_id, task.topic
    timings = WorkerTimings()

    def envelope(status, payload=None, message=""):
        return ResultEnvelope(
            tid, status, payload or TaskPayload(), timings, worker_id, message, endpoint_id, topic
        )

    def finish(env, t_start):
        t_end = now_ns()
        timings.time_on_worker_ms = _ms(t_start, t_end)
        events.record(tid, topic, "result_serialized", t_end, worker_id=worker_id)
        return env

    t0 = now_ns()
    events.record(tid, topic, "started_on_worker", t0, worker_id=worker_id)
    try:
        payload = TaskPayload.from_bytes(task.payload_bytes)
    except Exception as exc:
        t1 = now_ns()
        timings.deserialize_ms = _ms(t0, t1)
        return finish(envelope(Status.INFRA_ERROR, message=f"deserialize: {exc}"), t0)
    t1 = now_ns()
    timings.deserialize_ms = _ms(t0, t1)

    impl = impl_registry.get(task.function_name)
    if impl is None:
        return finish(envelope(Status.INFRA_ERROR, message=f"no implementation for {task.function_name!r}"), t0)
    if resource_kind is not None and impl.resource != resource_kind:
        return finish(
            envelope(Status.INFRA_ERROR, message=f"{impl.name} needs {impl.resource}, endpoint is {resource_kind}"),
            t0,
        )

    try:
        restored = restore(payload, cache)
    except FabricError as exc:
        timings.resolve_ms = _ms(t1, now_ns())
        return finish(envelope(Status.INFRA_ERROR, message=str(exc)), t0)
    t2 = now_ns()
    timings.resolve_ms = _ms(t1, t2) if payload.references() else 0.0
    events.record(tid, topic, "inputs_resolved", t2, worker_id=worker_id)

    ctx = TaskContext(dict(task.function_params), dict(payload.metadata), worker_id)
    status, message, outputs = Status.SUCCESS, "", {}
    try:
        outputs = impl(restored.as_dict(), ctx)
    except Exception as exc:
        status, message = Status.TASK_ERROR, f"{type(exc).__name__}: {exc}"
    t3 = now_ns()
    timings.execute_ms = _ms(t2, t3)
    events.record(tid, topic, "finished_on_worker", t3, worker_id=worker_id)

    result = TaskPayload()
    if status is Status.SUCCESS:
        try:
            result = scan_and_proxy(TaskPayload.of(dict(payload.metadata), **outputs), result_policy, topic, registry)
            result.to_bytes()  # surface encoding errors inside the timed phase
        except FabricError as exc:
            status, message, result = Status.INFRA_ERROR, str(exc), TaskPayload()
    t4 = now_ns()
    timings.serialize_ms = _ms(t3, t4)
    return finish(envelope(status, result, message), t0)


class Endpoint:
    def __init__(
        self,
        spec: EndpointSpec,
        relay_address: str,
        events=None,
        implementations: dict[str, TaskImplementation] | None = None,
        fetch_timeout: float = 0.5,
        drain_timeout: float = 60.0,
        clock_dir: str | Path | None = None,
    ):
        self.spec = spec
        self.relay_address = relay_address
        self.events = events or NullLog()
        self.implementations = implementations if implementations is not None else default_implementations()
        self.fetch_timeout = fetch_timeout
        self.drain_timeout = drain_timeout
        self.clock_dir = Path(clock_dir) if clock_dir else None

        self.client = RelayClient(relay_address)
        self.registry = spec.registry()
        self.cache = ResolveCache(self.registry, spec.cache_bytes)

        self._work: queue.Queue = queue.Queue()
        self._results: queue.Queue = queue.Queue()
        self._slots = threading.Condition()
        self._reserved = 0  # fetched and not yet finished
        self._running = 0
        self.max_running = 0
        self.executed = 0
        self.posted = 0
        self._stop = threading.Event()
        self._fetch_done = threading.Event()
        self._workers_left = spec.worker_slots
        self._fatal: BaseException | None = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle -------------------------------------------------------
    def start(self) -> None:
        if self.clock_dir is not None:
            self._write_clock_offset()
        n = self.spec.worker_slots
        self._threads = [
            threading.Thread(target=self._fetch_loop, name="fetch", daemon=True),
            threading.Thread(target=self._poster, name="poster", daemon=True),
        ] + [
            threading.Thread(target=self._worker, args=(f"{self.spec.endpoint_id}/w{i}",), name=f"w{i}", daemon=True)
            for i in range(n)
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        """Stop fetching, finish and post every fetched task, then return."""
        self._stop.set()
        deadline = time.monotonic() + self.drain_timeout
        for t in self._threads:
            t.join(max(0.0, deadline - time.monotonic()))
        self.client.close()
        self.registry.close()

    @property
    def fatal(self) -> BaseException | None:
        return self._fatal

    def idle(self) -> bool:
        with self._slots:
            return self._reserved == 0 and self._results.unfinished_tasks == 0

    def _write_clock_offset(self) -> None:
        backoff = Backoff()
        while True:
            try:
                est = self.client.clock_offset()
                break
            except RelayUnavailableError:
                time.sleep(backoff.next())
        self.clock_dir.mkdir(parents=True, exist_ok=True)
        path = self.clock_dir / f"clock-{self.spec.endpoint_id}.json"
        path.write_text(json.dumps({"role": self.spec.endpoint_id, **est}))

    # -- threads ---------------------------------------------------------
    def _fetch_loop(self) -> None:
        try:
            self._fetch()
        finally:
            self._fetch_done.set()

    def _fetch(self) -> None:
        backoff = Backoff()
        spec = self.spec
        while not self._stop.is_set():
            with self._slots:
                while self._reserved >= spec.worker_slots and not self._stop.is_set():
                    self._slots.wait(0.1)
                free = spec.worker_slots - self._reserved
            if self._stop.is_set():
                break
            try:
                tasks = self.client.fetch_tasks(spec.endpoint_id, spec.pairing_token, free, self.fetch_timeout)
                backoff.reset()
            except AuthError as exc:
                log.error("endpoint %s: %s", spec.endpoint_id, exc)
                self._fatal = exc
                self._stop.set()
                break
            except RelayUnavailableError:
                delay = backoff.next()
                log.warning("relay unavailable; retrying in %.1fs", delay)
                self._stop.wait(delay)
                continue
            t = now_ns()
            with self._slots:
                self._reserved += len(tasks)
            for task in tasks:
                self.events.record(task.task_id, task.topic, "fetched_by_endpoint", t)
                self._work.put(task)

    def _worker(self, worker_id: str) -> None:
        while True:
            try:
                task = self._work.get(timeout=0.05)
            except queue.Empty:
                if self._fetch_done.is_set() and self._work.empty():
                    with self._slots:
                        self._workers_left -= 1
                    return
                continue
            with self._slots:
                self._running += 1
                self.max_running = max(self.max_running, self._running)
            try:
                env = execute_task(
                    task,
                    self.implementations,
                    self.cache,
                    self.spec.result_policy,
                    self.registry,
                    worker_id,
                    self.spec.endpoint_id,
                    self.events,
                    self.spec.resource_kind,
                )
            except Exception as exc:  # never lose a task to a worker bug
                log.exception("worker %s crashed on %s", worker_id, task.task_id)
                env = ResultEnvelope(
                    task.task_id, Status.INFRA_ERROR, message=repr(exc), worker_id=worker_id,
                    endpoint_id=self.spec.endpoint_id, topic=task.topic,
                )
            self._results.put(env)
            with self._slots:
                self._running -= 1
                self._reserved -= 1
                self.executed += 1
                self._slots.notify_all()

    def _poster(self) -> None:
        backoff = Backoff()
        spec = self.spec
        while True:
            try:
                env: ResultEnvelope = self._results.get(timeout=0.05)
            except queue.Empty:
                with self._slots:
                    if self._workers_left == 0 and self._results.empty():
                        return
                continue
            raw = env.to_bytes()
            t_post = now_ns()  # stamped at first transmission
            while True:
                try:
                    self.client.post_result(spec.endpoint_id, spec.pairing_token, env, raw)
                    backoff.reset()
                    break
                except RelayUnavailableError:
                    time.sleep(backoff.next())
                except UnknownTaskError as exc:
                    log.warning("result for %s dropped: %s", env.task_id, exc)
                    break
                except AuthError as exc:
                    self._fatal = exc
                    break
            self.events.record(env.task_id, env.topic, "result_posted", t_post, worker_id=env.worker_id)
            self.posted += 1
            self._results.task_done()


def run_endpoint(
    spec: EndpointSpec,
    relay_address: str,
    events=None,
    clock_dir: str | Path | None = None,
    drain_timeout: float = 60.0,
    install_signals: bool = True,
) -> Endpoint:
    """Run an endpoint until SIGTERM/SIGINT, then drain.  Raises on auth failure."""
    ep = Endpoint(spec, relay_address, events, drain_timeout=drain_timeout, clock_dir=clock_dir)
    done = threading.Event()
    if install_signals:
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: done.set())
    ep.start()
    while not done.wait(0.2):
        if ep.fatal is not None:
            break
    ep.stop()
    if isinstance(ep.fatal, AuthError):
        raise ep.fatal
    return ep


def endpoint_events(out_dir: str | Path | None, endpoint_id: str):
    if out_dir is None:
        return NullLog()
    return EventLog(Path(out_dir) / f"events-{endpoint_id}.jsonl")
