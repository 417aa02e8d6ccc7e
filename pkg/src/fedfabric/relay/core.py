"""Relay state machine: function registry, tiered payload storage, per-endpoint
FIFO queues with lease-based redelivery, and first-wins result acceptance.

The relay never holds endpoint addresses; endpoints and clients always call in.
"""

from __future__ import annotations

import collections
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field

from ..clock import WALL
from ..errors import (
    AuthError,
    PayloadTooLargeError,
    UnknownFunctionError,
    UnknownTaskError,
)
from ..refcore import TaskPayload
from ..stores.model import NetworkModel
from .protocol import FunctionRecord, ResultEnvelope, TaskDescriptor, Tier, new_id

log = logging.getLogger(__name__)

FAST_TIER_MODEL = NetworkModel(request_latency_ms=2.0, bandwidth_bytes_per_s=200e6)
BLOB_TIER_MODEL = NetworkModel(request_latency_ms=40.0, bandwidth_bytes_per_s=25e6)


@dataclass(frozen=True)
class TierPolicy:
    fast_threshold_bytes: int = 20_000
    max_payload_bytes: int = 10_000_000
    fast_tier: NetworkModel = FAST_TIER_MODEL
    blob_tier: NetworkModel = BLOB_TIER_MODEL

    def __post_init__(self):
        if not self.fast_threshold_bytes < self.max_payload_bytes:
            raise ValueError("fast_threshold_bytes must be below max_payload_bytes")
        if self.blob_tier.request_latency_ms < self.fast_tier.request_latency_ms:
            raise ValueError("blob tier latency must be >= fast tier latency")

    def tier_for(self, size: int) -> Tier:
        return Tier.FAST if size < self.fast_threshold_bytes else Tier.BLOB

    def check(self, size: int) -> None:
        if size > self.max_payload_bytes:
            raise PayloadTooLargeError(
                f"payload of {size} bytes exceeds the {self.max_payload_bytes} byte limit"
            )

    def model(self, tier: Tier) -> NetworkModel:
        return self.fast_tier if tier is Tier.FAST else self.blob_tier

    @classmethod
    def from_dict(cls, d: dict | None) -> "TierPolicy":
        d = dict(d or {})
        fast = NetworkModel.from_dict(d.pop("fast_tier", None), FAST_TIER_MODEL)
        blob = NetworkModel.from_dict(d.pop("blob_tier", None), BLOB_TIER_MODEL)
        return cls(fast_tier=fast, blob_tier=blob, **d)


class TierStore:
    """Two key/value tiers with injected per-operation latency."""

    def __init__(self, policy: TierPolicy, clock=WALL):
        self.policy = policy
        self.clock = clock
        self._data: dict[str, tuple[Tier, bytes]] = {}
        self._lock = threading.Lock()

    def put(self, key: str, data: bytes, tier: Tier) -> None:
        self.clock.sleep(self.policy.model(tier).op_seconds(len(data)))
        with self._lock:
            self._data[key] = (tier, data)

    def get(self, key: str) -> bytes:
        with self._lock:
            tier, data = self._data[key]
        self.clock.sleep(self.policy.model(tier).op_seconds(len(data)))
        return data

    def tier(self, key: str) -> Tier:
        with self._lock:
            return self._data[key][0]


QUEUED, IN_FLIGHT, COMPLETED, REJECTED = "queued", "in-flight", "completed", "rejected"


@dataclass
class _Task:
    header: TaskDescriptor  # payload stripped; bytes live in the tier store
    seq: int
    state: str = QUEUED
    lease_expiry: float = 0.0
    deliveries: int = 0
    submitted_at: float = 0.0
    delivered_to: str = ""


@dataclass
class _Result:
    tier: Tier
    delivered: bool = False


@dataclass
class RelayConfig:
    host: str = "127.0.0.1"
    port: int = 0
    admin_token: str = "fedfabric-admin"
    lease_s: float = 60.0
    tiers: TierPolicy = field(default_factory=TierPolicy)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RelayConfig":
        d = dict(d or {})
        tiers = TierPolicy.from_dict(d.pop("tiers", None))
        return cls(tiers=tiers, **d)


class RelayCore:
    def __init__(self, config: RelayConfig | None = None, clock=WALL):
        self.config = config or RelayConfig()
        self.policy = self.config.tiers
        self.clock = clock
        self.tiers = TierStore(self.policy, clock)
        self._cond = threading.Condition()
        self._functions: dict[str, FunctionRecord] = {}
        self._function_ids: dict[tuple, str] = {}
        self._tokens: dict[str, str] = {}
        self._tasks: dict[str, _Task] = {}
        self._queues: dict[str, collections.deque[str]] = collections.defaultdict(collections.deque)
        self._results: dict[str, _Result] = {}
        self._client_queues: dict[str, collections.deque[str]] = collections.defaultdict(collections.deque)
        self._seq = 0
        self.counters = collections.Counter()

    # -- registry ---------------------------------------------------------
    def register_function(self, name: str, body: dict[str, str] | None = None) -> str:
        if not name:
            raise ValueError("function name must be nonempty")
        frozen = tuple(sorted((str(k), str(v)) for k, v in (body or {}).items()))
        with self._cond:
            fid = self._function_ids.get((name, frozen))
            if fid is None:
                fid = new_id()
                self._functions[fid] = FunctionRecord(fid, name, frozen)
                self._function_ids[(name, frozen)] = fid
            return fid

    def function(self, function_id: str) -> FunctionRecord:
        try:
            return self._functions[function_id]
        except KeyError:
            raise UnknownFunctionError(f"unknown function {function_id}") from None

    # -- pairing ----------------------------------------------------------
    def pair(self, endpoint_id: str, admin_token: str) -> str:
        if not secrets.compare_digest(admin_token, self.config.admin_token):
            raise AuthError("bad admin token")
        if not endpoint_id:
            raise ValueError("endpoint id must be nonempty")
        token = secrets.token_bytes(32).hex()
        with self._cond:
            self._tokens[endpoint_id] = token
        return token

    def _auth(self, endpoint_id: str, token: str) -> None:
        expected = self._tokens.get(endpoint_id)
        if expected is None or not secrets.compare_digest(expected, token):
            raise AuthError(f"bad token for endpoint {endpoint_id}")

    # -- submission -------------------------------------------------------
    def submit(self, task: TaskDescriptor) -> tuple[str, Tier]:
        """Persist the payload in its tier and queue the task for its endpoint."""
        if not task.endpoint_id:
            raise ValueError("endpoint id must be nonempty")
        with self._cond:
            if task.function_id not in self._functions:
                self._reject()
                raise UnknownFunctionError(f"unknown function {task.function_id}")
        size = task.payload_size
        try:
            self.policy.check(size)
        except PayloadTooLargeError:
            with self._cond:
                self._reject()
            raise
        tier = self.policy.tier_for(size)
        self.tiers.put(f"task:{task.task_id}", task.payload_bytes, tier)
        fn = self._functions[task.function_id]
        header = TaskDescriptor(
            task_id=task.task_id,
            function_id=task.function_id,
            endpoint_id=task.endpoint_id,
            topic=task.topic,
            payload=TaskPayload(),
            created_at=task.created_at,
            tier=tier,
            client_id=task.client_id,
            function_name=fn.name,
            function_params=fn.params,
        )
        with self._cond:
            self.counters["submitted"] += 1
            self._seq += 1
            self._tasks[task.task_id] = _Task(header, self._seq, submitted_at=self.clock.now())
            self._queues[task.endpoint_id].append(task.task_id)
            self._cond.notify_all()
        return task.task_id, tier

    def _reject(self) -> None:
        self.counters["submitted"] += 1
        self.counters["rejected"] += 1

    def _reap_locked(self, now: float) -> None:
        expired = [
            t for t in self._tasks.values() if t.state == IN_FLIGHT and t.lease_expiry <= now
        ]
        for t in sorted(expired, key=lambda t: t.seq, reverse=True):
            t.state = QUEUED
            self._queues[t.header.endpoint_id].appendleft(t.header.task_id)
            self.counters["redelivered"] += 1
            log.info("lease expired for %s; requeued", t.header.task_id)
        if expired:
            self._cond.notify_all()

    def reap(self) -> None:
        with self._cond:
            self._reap_locked(self.clock.now())

    def fetch_tasks(
        self, endpoint_id: str, token: str, max_n: int, timeout: float = 0.0, decode: bool = True
    ) -> list[TaskDescriptor]:
        if max_n < 1:
            return []
        deadline = time.monotonic() + timeout
        with self._cond:
            self._auth(endpoint_id, token)
            queue = self._queues[endpoint_id]
            while True:
                self._reap_locked(self.clock.now())
                while queue and self._tasks[queue[0]].state != QUEUED:
                    queue.popleft()
                if queue:
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(min(remaining, 0.25))
            taken: list[_Task] = []
            now = self.clock.now()
            while queue and len(taken) < max_n:
                t = self._tasks[queue.popleft()]
                if t.state != QUEUED:
                    continue
                t.state = IN_FLIGHT
                t.lease_expiry = now + self.config.lease_s
                t.deliveries += 1
                t.delivered_to = endpoint_id
                taken.append(t)
        out = []
        for t in taken:
            data = self.tiers.get(f"task:{t.header.task_id}")
            h = t.header
            out.append(
                TaskDescriptor(
                    task_id=h.task_id,
                    function_id=h.function_id,
                    endpoint_id=h.endpoint_id,
                    topic=h.topic,
                    payload=TaskPayload.from_bytes(data) if decode else TaskPayload(),
                    created_at=h.created_at,
                    tier=h.tier,
                    client_id=h.client_id,
                    function_name=h.function_name,
                    function_params=dict(h.function_params),
                    delivery=t.deliveries,
                    _payload_bytes=data,
                )
            )
        return out

    # -- results ----------------------------------------------------------
    def post_result(self, endpoint_id: str, token: str, envelope: ResultEnvelope, raw: bytes | None = None) -> bool:
        """Store a result; returns True when it duplicates an accepted one."""
        with self._cond:
            self._auth(endpoint_id, token)
            t = self._tasks.get(envelope.task_id)
            if t is None or t.header.endpoint_id != endpoint_id or t.deliveries == 0:
                raise UnknownTaskError(f"task {envelope.task_id} was not delivered to {endpoint_id}")
            if t.state == COMPLETED:
                self.counters["duplicate_results"] += 1
                return True
        raw = raw if raw is not None else envelope.to_bytes()
        tier = self.policy.tier_for(len(raw))
        key = f"result:{envelope.task_id}"
        with self._cond:
            if t.state == COMPLETED:
                self.counters["duplicate_results"] += 1
                return True
            # claim before the slow tier write so a concurrent duplicate loses
            t.state = COMPLETED
        self.tiers.put(key, raw, tier)
        with self._cond:
            self.counters["completed"] += 1
            self._results[envelope.task_id] = _Result(tier)
            self._client_queues[t.header.client_id].append(envelope.task_id)
            self._cond.notify_all()
        return False

    def get_result(
        self, task_id: str | None = None, client_id: str | None = None, timeout: float = 0.0
    ) -> bytes | None:
        """Long-poll for one result, by task id or the next one for a client.

        Returns the encoded envelope or None when the wait times out.
        """
        deadline = time.monotonic() + timeout
        with self._cond:
            if task_id is not None and task_id not in self._tasks:
                raise UnknownTaskError(f"unknown task {task_id}")
            while True:
                chosen = None
                if task_id is not None:
                    if task_id in self._results:
                        chosen = task_id
                        q = self._client_queues[self._tasks[task_id].header.client_id]
                        if task_id in q:
                            q.remove(task_id)
                else:
                    q = self._client_queues[client_id or ""]
                    if q:
                        chosen = q.popleft()
                if chosen is not None:
                    res = self._results[chosen]
                    if not res.delivered:
                        res.delivered = True
                        self.counters["delivered"] += 1
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(min(remaining, 0.25))
        return self.tiers.get(f"result:{chosen}")

    # -- introspection ----------------------------------------------------
    def stats(self) -> dict[str, int]:
        with self._cond:
            states = collections.Counter(t.state for t in self._tasks.values())
            return {
                "submitted": self.counters["submitted"],
                "rejected": self.counters["rejected"],
                "queued": states[QUEUED],
                "in_flight": states[IN_FLIGHT],
                "completed": states[COMPLETED],
                "delivered": self.counters["delivered"],
                "results_pending": sum(1 for r in self._results.values() if not r.delivered),
                "duplicate_results": self.counters["duplicate_results"],
                "redelivered": self.counters["redelivered"],
                "functions": len(self._functions),
                "endpoints": len(self._tokens),
            }

    def residence_times(self) -> dict[str, float]:
        """Submission time per task id (relay clock), for diagnostics."""
        with self._cond:
            return {k: t.submitted_at for k, t in self._tasks.items()}
