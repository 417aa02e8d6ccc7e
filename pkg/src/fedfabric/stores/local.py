"""In-process backends: memory-kv core, shared filesystem, simulated wide-area."""

from __future__ import annotations

import logging
import os
import secrets
import threading
from pathlib import Path

from ..clock import WALL
from ..errors import CapacityExceededError, NotFoundError, TransferError
from ..refcore import ObjectKey, ResolutionRecipe, StoreKind, digest
from .model import (
    FILESYSTEM_MODEL,
    MEMORY_KV_MODEL,
    WIDE_AREA_MODEL,
    Counters,
    NetworkModel,
    Store,
    StoreStats,
    TicketState,
    TransferTicket,
    check_size,
)

log = logging.getLogger(__name__)


class InMemoryStore(Store):
    """Dictionary-backed store; the engine behind the memory-kv server."""

    kind = StoreKind.MEMORY_KV

    def __init__(
        self,
        store_id: str,
        model: NetworkModel = MEMORY_KV_MODEL,
        capacity_bytes: int = 8 << 30,
        clock=WALL,
    ):
        self.store_id = store_id
        self.model = model
        self.capacity_bytes = capacity_bytes
        self.clock = clock
        self._data: dict[str, bytes] = {}
        self._used = 0
        self._lock = threading.Lock()
        self._counters = Counters()
        self._rng = model.rng()

    def _delay(self, nbytes: int) -> None:
        with self._lock:
            factor = self.model.jitter(self._rng)
        self.clock.sleep(self.model.op_seconds(nbytes) * factor)

    def put(self, key: ObjectKey, data: bytes) -> TransferTicket:
        check_size(key, data)
        with self._lock:
            old = len(self._data.get(key.key, b""))
            if self._used - old + len(data) > self.capacity_bytes:
                raise CapacityExceededError(
                    f"{self.store_id}: {len(data)} bytes exceeds remaining capacity"
                )
        self._delay(len(data))
        with self._lock:
            old = len(self._data.get(key.key, b""))
            self._data[key.key] = bytes(data)
            self._used += len(data) - old
        self._counters.record_put(len(data))
        now = self.clock.now()
        return TransferTicket.immediate(key, now)

    def get(self, key: ObjectKey) -> bytes:
        with self._lock:
            data = self._data.get(key.key)
        if data is None:
            self._delay(0)
            raise NotFoundError(f"{self.store_id}: no object {key.key}")
        self._delay(len(data))
        self._counters.record_get(len(data))
        return data

    def exists(self, key: ObjectKey) -> bool:
        with self._lock:
            return key.key in self._data

    def delete(self, key: ObjectKey) -> None:
        with self._lock:
            data = self._data.pop(key.key, None)
            if data is not None:
                self._used -= len(data)

    def corrupt(self, key: ObjectKey, index: int = 0) -> None:
        """Flip one stored byte (test hook)."""
        with self._lock:
            buf = bytearray(self._data[key.key])
            buf[index] ^= 0xFF
            self._data[key.key] = bytes(buf)

    def stats(self) -> StoreStats:
        return self._counters.snapshot()

    def recipe(self) -> ResolutionRecipe:
        return ResolutionRecipe(self.kind, self.store_id, address="inproc")


class FileSystemStore(Store):
    """Objects as files under ``<root>/<store_id>/<key-hex>`` plus a ``.meta`` sidecar.

    Writes go to a temporary name and are renamed into place, so readers never
    observe partial objects.
    """

    kind = StoreKind.FILESYSTEM

    def __init__(
        self,
        store_id: str,
        root: str | os.PathLike,
        model: NetworkModel = FILESYSTEM_MODEL,
        capacity_bytes: int = 8 << 30,
        clock=WALL,
    ):
        self.store_id = store_id
        self.root = Path(root)
        self.dir = self.root / store_id
        self.dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.dir, os.W_OK):
            raise PermissionError(f"{self.dir} is not writable")
        self.model = model
        self.capacity_bytes = capacity_bytes
        self.clock = clock
        self._counters = Counters()
        self._lock = threading.Lock()
        self._used = sum(p.stat().st_size for p in self.dir.iterdir() if _is_object(p))

    def path(self, key: ObjectKey) -> Path:
        return self.dir / key.key

    def _atomic_write(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(f".tmp-{path.name}-{secrets.token_hex(4)}")
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)

    def put(self, key: ObjectKey, data: bytes, ticket: TransferTicket | None = None) -> TransferTicket:
        check_size(key, data)
        with self._lock:
            if self._used + len(data) > self.capacity_bytes:
                raise CapacityExceededError(
                    f"{self.store_id}: {len(data)} bytes exceeds remaining capacity"
                )
            self._used += len(data)
        t0 = self.clock.now()
        self.clock.sleep(self.model.op_seconds(len(data)))
        path = self.path(key)
        try:
            self._atomic_write(path, data)
        except Exception:
            with self._lock:
                self._used -= len(data)
            raise
        ticket = ticket or TransferTicket(key, t0, t0, self.clock.now())
        self.write_meta(key, data, ticket)
        self._counters.record_put(len(data))
        return ticket

    def write_meta(self, key: ObjectKey, data: bytes | None, ticket: TransferTicket) -> None:
        lines = {
            "size": key.size_bytes,
            "enqueue_time": repr(ticket.enqueue_time),
            "start_time": repr(ticket.start_time),
            "completion_time": repr(ticket.completion_time),
        }
        if data is not None:
            lines["digest"] = digest(data).hex()
        else:
            lines.update({k: v for k, v in self.read_meta(key).items() if k == "digest"})
        text = "".join(f"{k}={v}\n" for k, v in lines.items())
        self._atomic_write(self.dir / f"{key.key}.meta", text.encode())

    def read_meta(self, key: ObjectKey) -> dict[str, str]:
        path = self.dir / f"{key.key}.meta"
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise NotFoundError(f"{self.store_id}: no metadata for {key.key}") from None
        return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)

    def get(self, key: ObjectKey) -> bytes:
        self.clock.sleep(self.model.op_seconds(key.size_bytes))
        data = self.read_raw(key)
        self._counters.record_get(len(data))
        return data

    def read_raw(self, key: ObjectKey) -> bytes:
        """The stored bytes, without injected latency or accounting."""
        try:
            with open(self.path(key), "rb") as f:
                return f.read()
        except FileNotFoundError:
            raise NotFoundError(f"{self.store_id}: no object {key.key}") from None

    def exists(self, key: ObjectKey) -> bool:
        return self.path(key).exists()

    def delete(self, key: ObjectKey) -> None:
        path = self.path(key)
        try:
            size = path.stat().st_size
            path.unlink()
        except FileNotFoundError:
            return
        with self._lock:
            self._used -= size
        (self.dir / f"{key.key}.meta").unlink(missing_ok=True)

    def stats(self) -> StoreStats:
        return self._counters.snapshot()

    def recipe(self) -> ResolutionRecipe:
        return ResolutionRecipe(self.kind, self.store_id, root=str(self.root))


def _is_object(p: Path) -> bool:
    return p.is_file() and not p.name.startswith(".") and not p.name.endswith(".meta")


class _Transfer:
    __slots__ = ("ticket", "history")

    def __init__(self, ticket: TransferTicket):
        self.ticket = ticket
        self.history = [ticket]


class WideAreaStore(Store):
    """Simulated third-party transfer service.

    ``put`` stages the object on the local filesystem, pays one control-plane
    request and enqueues a transfer.  Transfers are admitted FIFO onto
    ``max_concurrent_transfers`` slots; each occupies its slot for
    ``startup + size / bandwidth`` (times jitter).  Because every duration is
    known at admission, the whole timeline is fixed when the transfer is
    enqueued, which makes the same code exact under a virtual clock.

    ``get`` blocks until the object's transfer completes.  A failed transfer
    is re-enqueued up to ``max_retries`` times before raising.
    """

    kind = StoreKind.WIDE_AREA

    def __init__(
        self,
        store_id: str,
        staging_dir: str | os.PathLike,
        model: NetworkModel = WIDE_AREA_MODEL,
        clock=WALL,
        capacity_bytes: int = 8 << 30,
        failure_rate: float = 0.0,
        max_retries: int = 2,
        staging_model: NetworkModel = FILESYSTEM_MODEL,
    ):
        self.store_id = store_id
        self.model = model
        self.clock = clock
        self.failure_rate = failure_rate
        self.max_retries = max_retries
        self._staging = FileSystemStore(
            store_id, staging_dir, model=staging_model, capacity_bytes=capacity_bytes, clock=clock
        )
        self._lock = threading.Lock()
        self._slot_free = [float("-inf")] * model.max_concurrent_transfers
        self._last_start = float("-inf")
        self._transfers: dict[str, _Transfer] = {}
        self._jitter_rng = model.rng()
        self._fail_rng = model.rng()
        self._fail_rng.seed(model.rng_seed + 1)
        self._counters = Counters()

    def _schedule(self, key: ObjectKey, enqueue: float, attempt: int = 1) -> TransferTicket:
        with self._lock:
            slot = min(range(len(self._slot_free)), key=self._slot_free.__getitem__)
            start = max(enqueue, self._slot_free[slot], self._last_start)
            duration = self.model.transfer_seconds(key.size_bytes) * self.model.jitter(self._jitter_rng)
            failed = self.failure_rate > 0 and self._fail_rng.random() < self.failure_rate
            ticket = TransferTicket(key, enqueue, start, start + duration, failed, attempt)
            self._slot_free[slot] = ticket.completion_time
            self._last_start = start
            rec = self._transfers.get(key.key)
            if rec is None:
                self._transfers[key.key] = _Transfer(ticket)
            else:
                rec.ticket = ticket
                rec.history.append(ticket)
            return ticket

    def put(self, key: ObjectKey, data: bytes) -> TransferTicket:
        check_size(key, data)
        t0 = self.clock.now()
        self._staging.put(key, data, ticket=TransferTicket(key, t0, t0, t0))
        # the transfer request to the service itself
        self.clock.sleep(self.model.request_latency_ms / 1e3)
        ticket = self._schedule(key, self.clock.now())
        self._staging.write_meta(key, None, ticket)
        self._counters.record_put(len(data))
        return ticket

    def ticket(self, key: ObjectKey) -> TransferTicket | None:
        with self._lock:
            rec = self._transfers.get(key.key)
            return rec.ticket if rec else None

    def wait(self, key: ObjectKey) -> TransferTicket:
        """Block until the transfer for ``key`` is done (retrying failures)."""
        while True:
            ticket = self.ticket(key)
            if ticket is None:
                raise NotFoundError(f"{self.store_id}: no transfer for {key.key}")
            self.clock.sleep_until(ticket.completion_time)
            if not ticket.failed:
                return ticket
            if ticket.attempt > self.max_retries:
                raise TransferError(
                    f"{self.store_id}: transfer of {key.key} failed after {ticket.attempt} attempts"
                )
            with self._lock:
                current = self._transfers[key.key].ticket
            if current is ticket:
                log.info("retrying transfer %s (attempt %d)", key.key, ticket.attempt + 1)
                self._schedule(key, self.clock.now(), ticket.attempt + 1)

    def get(self, key: ObjectKey) -> bytes:
        self.wait(key)
        # delivery is fully modeled by the transfer; the staged copy is the destination
        data = self._staging.read_raw(key)
        self._counters.record_get(len(data))
        return data

    def exists(self, key: ObjectKey) -> bool:
        return self.ticket(key) is not None

    def delete(self, key: ObjectKey) -> None:
        with self._lock:
            self._transfers.pop(key.key, None)
        self._staging.delete(key)

    def timeline(self) -> list[TransferTicket]:
        """Every scheduled transfer attempt, for instrumentation."""
        with self._lock:
            return [t for rec in self._transfers.values() for t in rec.history]

    def active_transfers(self, now: float | None = None) -> int:
        now = self.clock.now() if now is None else now
        return sum(1 for t in self.timeline() if t.state_at(now) is TicketState.ACTIVE)

    def stats(self) -> StoreStats:
        return self._counters.snapshot(self.active_transfers())

    def recipe(self) -> ResolutionRecipe:
        return ResolutionRecipe(self.kind, self.store_id, address="inproc")
