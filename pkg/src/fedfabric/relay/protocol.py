"""Wire units routed through the relay and the frame message types."""

from __future__ import annotations

import enum
import json
import time
import uuid
from dataclasses import asdict, dataclass, field

from .. import wire
from ..refcore import TaskPayload

# request message types
REGISTER, SUBMIT, FETCH, POST_RESULT, GET_RESULT, STATS, PAIR, CLOCK = range(1, 9)
# response message types
RESP_OK, RESP_ERR = 0x80, 0x81

MESSAGE_NAMES = {
    REGISTER: "REGISTER",
    SUBMIT: "SUBMIT",
    FETCH: "FETCH",
    POST_RESULT: "POST_RESULT",
    GET_RESULT: "GET_RESULT",
    STATS: "STATS",
    PAIR: "PAIR",
    CLOCK: "CLOCK",
}


class Tier(str, enum.Enum):
    FAST = "fast"
    BLOB = "blob"


class Status(str, enum.Enum):
    SUCCESS = "success"
    TASK_ERROR = "task-error"
    INFRA_ERROR = "infra-error"


def new_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class FunctionRecord:
    function_id: str
    name: str
    body: tuple[tuple[str, str], ...]  # builtin parameter block

    @property
    def params(self) -> dict[str, str]:
        return dict(self.body)


@dataclass
class TaskDescriptor:
    task_id: str
    function_id: str
    endpoint_id: str
    topic: str
    payload: TaskPayload
    created_at: float = field(default_factory=time.time)
    tier: Tier | None = None
    client_id: str = ""
    # filled in by the relay on delivery
    function_name: str = ""
    function_params: dict[str, str] = field(default_factory=dict)
    delivery: int = 0
    _payload_bytes: bytes | None = field(default=None, repr=False, compare=False)

    @property
    def payload_bytes(self) -> bytes:
        if self._payload_bytes is None:
            self._payload_bytes = self.payload.to_bytes()
        return self._payload_bytes

    @property
    def payload_size(self) -> int:
        return len(self.payload_bytes)

    def header(self) -> dict[str, str]:
        kv = {
            "task_id": self.task_id,
            "function_id": self.function_id,
            "endpoint_id": self.endpoint_id,
            "topic": self.topic,
            "created_at": repr(self.created_at),
            "client_id": self.client_id,
            "function_name": self.function_name,
            "delivery": str(self.delivery),
        }
        if self.tier is not None:
            kv["tier"] = self.tier.value
        return kv

    def to_bytes(self) -> bytes:
        return wire.encode_body(
            self.header(), [self.payload_bytes, wire.encode_kv(self.function_params)]
        )

    @classmethod
    def from_bytes(cls, data: bytes, decode_payload: bool = True) -> "TaskDescriptor":
        kv, blobs = wire.decode_body(data)
        desc = cls.from_parts(kv, blobs[0], decode_payload)
        if len(blobs) > 1:
            desc.function_params = wire.decode_kv(wire.Reader(blobs[1]))
        return desc

    @classmethod
    def from_parts(cls, kv: dict[str, str], payload_bytes: bytes, decode_payload: bool = True) -> "TaskDescriptor":
        payload = TaskPayload.from_bytes(payload_bytes) if decode_payload else TaskPayload()
        return cls(
            task_id=kv["task_id"],
            function_id=kv["function_id"],
            endpoint_id=kv["endpoint_id"],
            topic=kv["topic"],
            payload=payload,
            created_at=float(kv["created_at"]),
            tier=Tier(kv["tier"]) if "tier" in kv else None,
            client_id=kv.get("client_id", ""),
            function_name=kv.get("function_name", ""),
            delivery=int(kv.get("delivery", "0")),
            _payload_bytes=payload_bytes,
        )


@dataclass
class WorkerTimings:
    deserialize_ms: float = 0.0
    resolve_ms: float = 0.0
    execute_ms: float = 0.0
    serialize_ms: float = 0.0
    time_on_worker_ms: float = 0.0

    def parts_ms(self) -> float:
        return self.deserialize_ms + self.resolve_ms + self.execute_ms + self.serialize_ms


@dataclass
class ResultEnvelope:
    task_id: str
    status: Status
    payload: TaskPayload = field(default_factory=TaskPayload)
    timings: WorkerTimings = field(default_factory=WorkerTimings)
    worker_id: str = ""
    message: str = ""
    endpoint_id: str = ""
    topic: str = ""

    def __post_init__(self):
        self.status = Status(self.status)

    def to_bytes(self) -> bytes:
        kv = {
            "task_id": self.task_id,
            "status": self.status.value,
            "worker_id": self.worker_id,
            "message": self.message,
            "endpoint_id": self.endpoint_id,
            "topic": self.topic,
            "timings": json.dumps(asdict(self.timings)),
        }
        return wire.encode_body(kv, [self.payload.to_bytes()])

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResultEnvelope":
        kv, blobs = wire.decode_body(data)
        return cls(
            task_id=kv["task_id"],
            status=Status(kv["status"]),
            payload=TaskPayload.from_bytes(blobs[0]),
            timings=WorkerTimings(**json.loads(kv["timings"])),
            worker_id=kv.get("worker_id", ""),
            message=kv.get("message", ""),
            endpoint_id=kv.get("endpoint_id", ""),
            topic=kv.get("topic", ""),
        )
