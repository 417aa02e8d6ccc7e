from __future__ import annotations

import abc
import enum
import math
import random
import threading
from dataclasses import asdict, dataclass, replace

from ..refcore import ObjectKey, ResolutionRecipe, StoreKind


@dataclass(frozen=True)
class NetworkModel:
    """Latency/bandwidth model injected into store and relay operations.

    ``bandwidth_bytes_per_s`` of ``inf`` means payload size adds no delay.
    Jitter stretches a delay by a factor drawn uniformly from
    ``[1, 1 + jitter_fraction)``.
    """

    request_latency_ms: float = 0.0
    startup_latency_ms: float = 0.0
    bandwidth_bytes_per_s: float = math.inf
    max_concurrent_transfers: int = 1
    jitter_fraction: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.request_latency_ms < 0 or self.startup_latency_ms < 0:
            raise ValueError("latencies must be >= 0")
        if not self.bandwidth_bytes_per_s > 0:
            raise ValueError("bandwidth must be > 0")
        if self.max_concurrent_transfers < 1:
            raise ValueError("max_concurrent_transfers must be >= 1")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError("jitter_fraction must be in [0, 1)")

    def payload_seconds(self, nbytes: int) -> float:
        return nbytes / self.bandwidth_bytes_per_s

    def op_seconds(self, nbytes: int = 0) -> float:
        """Control-plane latency plus payload time for one request."""
        return self.request_latency_ms / 1e3 + self.payload_seconds(nbytes)

    def transfer_seconds(self, nbytes: int) -> float:
        """Unjittered duration of one transfer once it holds a slot."""
        return self.startup_latency_ms / 1e3 + self.payload_seconds(nbytes)

    def rng(self) -> random.Random:
        return random.Random(self.rng_seed)

    def jitter(self, rng: random.Random) -> float:
        if self.jitter_fraction == 0:
            return 1.0
        return 1.0 + self.jitter_fraction * rng.random()

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["bandwidth_bytes_per_s"]):
            d["bandwidth_bytes_per_s"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict | None, base: "NetworkModel | None" = None) -> "NetworkModel":
        base = base or cls()
        if not d:
            return base
        d = dict(d)
        if "bandwidth_bytes_per_s" in d and d["bandwidth_bytes_per_s"] is None:
            d["bandwidth_bytes_per_s"] = math.inf
        return replace(base, **d)


MB = 1_000_000

MEMORY_KV_MODEL = NetworkModel(request_latency_ms=1.0, bandwidth_bytes_per_s=2e9)
FILESYSTEM_MODEL = NetworkModel(request_latency_ms=5.0, bandwidth_bytes_per_s=2e9)
WIDE_AREA_MODEL = NetworkModel(
    request_latency_ms=500.0,
    startup_latency_ms=1000.0,
    bandwidth_bytes_per_s=50 * MB,
    max_concurrent_transfers=4,
)

DEFAULT_MODELS = {
    StoreKind.MEMORY_KV: MEMORY_KV_MODEL,
    StoreKind.FILESYSTEM: FILESYSTEM_MODEL,
    StoreKind.WIDE_AREA: WIDE_AREA_MODEL,
}


class TicketState(str, enum.Enum):
    QUEUED = "queued"
    ACTIVE = "active"
    DONE = "done"
    FAILED = "failed"


@dataclass
class TransferTicket:
    key: ObjectKey
    enqueue_time: float
    start_time: float
    completion_time: float
    failed: bool = False
    attempt: int = 1

    def state_at(self, now: float) -> TicketState:
        if now < self.start_time:
            return TicketState.QUEUED
        if now < self.completion_time:
            return TicketState.ACTIVE
        return TicketState.FAILED if self.failed else TicketState.DONE

    @classmethod
    def immediate(cls, key: ObjectKey, t: float) -> "TransferTicket":
        return cls(key, t, t, t)

    def to_kv(self) -> dict[str, str]:
        return {
            "store_id": self.key.store_id,
            "key": self.key.key,
            "size": str(self.key.size_bytes),
            "enqueue_time": repr(self.enqueue_time),
            "start_time": repr(self.start_time),
            "completion_time": repr(self.completion_time),
            "failed": "1" if self.failed else "0",
            "attempt": str(self.attempt),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TransferTicket":
        return cls(
            ObjectKey(kv["store_id"], kv["key"], int(kv["size"])),
            float(kv["enqueue_time"]),
            float(kv["start_time"]),
            float(kv["completion_time"]),
            kv.get("failed") == "1",
            int(kv.get("attempt", "1")),
        )


@dataclass
class StoreStats:
    puts: int = 0
    gets: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    active_transfers: int = 0

    def to_kv(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "StoreStats":
        return cls(**{k: int(v) for k, v in kv.items() if k in cls.__dataclass_fields__})


@dataclass
class StoreConfig:
    store_id: str
    kind: StoreKind
    host: str = "127.0.0.1"
    port: int = 0
    root: str | None = None
    staging_dir: str | None = None
    network: NetworkModel | None = None
    capacity_bytes: int = 8 << 30
    failure_rate: float = 0.0
    max_retries: int = 2

    def __post_init__(self):
        self.kind = StoreKind(self.kind)
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be > 0")
        if self.network is None:
            self.network = DEFAULT_MODELS[self.kind]

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def from_dict(cls, d: dict) -> "StoreConfig":
        d = dict(d)
        kind = StoreKind(d.pop("kind"))
        net = NetworkModel.from_dict(d.pop("network", None), DEFAULT_MODELS[kind])
        return cls(kind=kind, network=net, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["network"] = self.network.to_dict()
        return d


class Store(abc.ABC):
    """Common surface of every backend, local or remote."""

    store_id: str
    kind: StoreKind

    @abc.abstractmethod
    def put(self, key: ObjectKey, data: bytes) -> TransferTicket: ...

    @abc.abstractmethod
    def get(self, key: ObjectKey) -> bytes: ...

    @abc.abstractmethod
    def exists(self, key: ObjectKey) -> bool: ...

    @abc.abstractmethod
    def delete(self, key: ObjectKey) -> None: ...

    @abc.abstractmethod
    def stats(self) -> StoreStats: ...

    @abc.abstractmethod
    def recipe(self) -> ResolutionRecipe: ...

    def ticket(self, key: ObjectKey) -> TransferTicket | None:
        return None

    def close(self) -> None:
        pass


class Counters:
    """Thread-safe counters behind StoreStats."""

    def __init__(self):
        self._lock = threading.Lock()
        self.stats = StoreStats()

    def record_put(self, n: int) -> None:
        with self._lock:
            self.stats.puts += 1
            self.stats.bytes_in += n

    def record_get(self, n: int) -> None:
        with self._lock:
            self.stats.gets += 1
            self.stats.bytes_out += n

    def snapshot(self, active: int = 0) -> StoreStats:
        with self._lock:
            return replace(self.stats, active_transfers=active)


def check_size(key: ObjectKey, data: bytes) -> None:
    if len(data) != key.size_bytes:
        raise ValueError(f"data length {len(data)} != key.size_bytes {key.size_bytes}")

