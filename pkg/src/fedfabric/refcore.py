"""Pass-by-reference core: object keys, references, proxy policies and payloads.

Large byte fields are swapped for a :class:`Reference` when a task payload is
scanned; the bytes go to a backend store immediately (eager store) and are only
fetched when a consumer calls :func:`resolve` (lazy fetch).  Resolution goes
through a per-site :class:`ResolveCache` so repeated resolves of one reference
at one site cost a single store fetch.

Reference wire format (little-endian)::

    u32  length of the rest of the record
    u8   version (=1)
    u8   store kind code
    16B  object key
    u64  size in bytes
    32B  SHA-256 digest of the target
    kv   recipe (u16 count, then u16/utf8 key, u32/utf8 value pairs)
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import secrets
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Union

from . import wire
from .errors import (
    FabricError,
    IntegrityError,
    NotFoundError,
    ProxyAbortedError,
    RestoreError,
    StoreUnavailableError,
)

log = logging.getLogger(__name__)

REFERENCE_VERSION = 1
DEFAULT_CACHE_BYTES = 1 << 30


class StoreKind(str, enum.Enum):
    MEMORY_KV = "memory-kv"
    FILESYSTEM = "filesystem"
    WIDE_AREA = "wide-area"


_KIND_CODE = {StoreKind.MEMORY_KV: 1, StoreKind.FILESYSTEM: 2, StoreKind.WIDE_AREA: 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


@dataclass(frozen=True)
class ObjectKey:
    store_id: str
    key: str
    size_bytes: int

    def __post_init__(self):
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")
        if len(self.key) != 32:
            raise ValueError(f"key must be 32 hex chars, got {self.key!r}")

    @classmethod
    def new(cls, store_id: str, size_bytes: int) -> "ObjectKey":
        return cls(store_id, secrets.token_hex(16), size_bytes)

    @property
    def key_bytes(self) -> bytes:
        return bytes.fromhex(self.key)


@dataclass(frozen=True)
class ResolutionRecipe:
    """Everything a site needs to fetch a target: kind plus connection params."""

    store_kind: StoreKind
    store_id: str
    address: str | None = None  # host:port for socket stores
    root: str | None = None  # directory for filesystem stores
    transfer_ticket_id: str | None = None

    def to_kv(self) -> dict[str, str]:
        kv = {"store_id": self.store_id}
        for name in ("address", "root", "transfer_ticket_id"):
            val = getattr(self, name)
            if val is not None:
                kv[name] = val
        return kv

    @classmethod
    def from_kv(cls, kind: StoreKind, kv: dict[str, str]) -> "ResolutionRecipe":
        return cls(
            store_kind=kind,
            store_id=kv["store_id"],
            address=kv.get("address"),
            root=kv.get("root"),
            transfer_ticket_id=kv.get("transfer_ticket_id"),
        )


@dataclass(frozen=True)
class Reference:
    object_key: ObjectKey
    recipe: ResolutionRecipe
    content_digest: bytes

    @property
    def size_bytes(self) -> int:
        return self.object_key.size_bytes

    def to_bytes(self) -> bytes:
        body = b"".join(
            [
                wire.u8(REFERENCE_VERSION),
                wire.u8(_KIND_CODE[self.recipe.store_kind]),
                self.object_key.key_bytes,
                wire.u64(self.object_key.size_bytes),
                self.content_digest,
                wire.encode_kv(self.recipe.to_kv()),
            ]
        )
        return wire.u32(len(body)) + body

    @classmethod
    def read(cls, reader: wire.Reader) -> "Reference":
        length = reader.u32()
        r = wire.Reader(reader.take(length))
        version = r.u8()
        if version != REFERENCE_VERSION:
            raise wire.WireError(f"unsupported reference version {version}")
        code = r.u8()
        if code not in _CODE_KIND:
            raise wire.WireError(f"unknown store kind code {code}")
        kind = _CODE_KIND[code]
        key = bytes(r.take(16)).hex()
        size = r.u64()
        digest = bytes(r.take(32))
        recipe = ResolutionRecipe.from_kv(kind, wire.decode_kv(r))
        return cls(ObjectKey(recipe.store_id, key, size), recipe, digest)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Reference":
        r = wire.Reader(data)
        ref = cls.read(r)
        if r.remaining():
            raise wire.WireError("trailing bytes after reference")
        return ref


@dataclass(frozen=True)
class ProxyRule:
    threshold_bytes: float = math.inf
    store_id: str | None = None

    def __post_init__(self):
        if self.threshold_bytes < 0:
            raise ValueError("threshold_bytes must be >= 0")
        if math.isfinite(self.threshold_bytes) and self.store_id is None:
            raise ValueError("a finite threshold needs a store_id")

    def should_proxy(self, size: int) -> bool:
        # strict: objects equal to the threshold stay inline
        return size > self.threshold_bytes


NEVER_PROXY = ProxyRule()


@dataclass
class ProxyPolicy:
    rules: dict[str, ProxyRule] = field(default_factory=dict)
    default: ProxyRule | None = NEVER_PROXY

    def rule_for(self, topic: str) -> ProxyRule:
        rule = self.rules.get(topic, self.default)
        if rule is None:
            raise KeyError(f"no proxy rule for topic {topic!r}")
        return rule

    @classmethod
    def from_dict(cls, data: dict) -> "ProxyPolicy":
        def rule(d):
            t = d.get("threshold_bytes")
            return ProxyRule(math.inf if t is None else t, d.get("store_id"))

        rules = {k: rule(v) for k, v in data.get("topics", {}).items()}
        default = rule(data["default"]) if "default" in data else NEVER_PROXY
        return cls(rules, default)


Value = Union[bytes, Reference]


@dataclass(frozen=True)
class TaskPayload:
    """Ordered named fields, each inline bytes or a Reference, plus metadata."""

    fields: tuple[tuple[str, Value], ...] = ()
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((n, v) for n, v in self.fields))
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in payload: {names}")

    @classmethod
    def of(cls, metadata: dict[str, str] | None = None, **fields: Value) -> "TaskPayload":
        return cls(tuple(fields.items()), dict(metadata or {}))

    def __getitem__(self, name: str) -> Value:
        for n, v in self.fields:
            if n == name:
                return v
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    def as_dict(self) -> dict[str, Value]:
        return dict(self.fields)

    def references(self) -> list[Reference]:
        return [v for _, v in self.fields if isinstance(v, Reference)]

    def inline_bytes(self) -> int:
        return sum(len(v) for _, v in self.fields if not isinstance(v, Reference))

    def to_bytes(self) -> bytes:
        parts = [wire.u16(len(self.fields))]
        for name, value in self.fields:
            nb = name.encode()
            parts += [wire.u16(len(nb)), nb]
            if isinstance(value, Reference):
                rb = value.to_bytes()
                parts += [wire.u8(1), wire.u64(len(rb)), rb]
            else:
                parts += [wire.u8(0), wire.u64(len(value)), bytes(value)]
        parts.append(wire.encode_kv(self.metadata))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TaskPayload":
        r = wire.Reader(data)
        fields = []
        for _ in range(r.u16()):
            name = bytes(r.take(r.u16())).decode()
            kind = r.u8()
            raw = r.take(r.u64())
            if kind == 1:
                fields.append((name, Reference.from_bytes(bytes(raw))))
            elif kind == 0:
                fields.append((name, bytes(raw)))
            else:
                raise wire.WireError(f"bad field kind {kind}")
        meta = wire.decode_kv(r)
        return cls(tuple(fields), meta)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def proxy(obj: bytes, store) -> Reference:
    """Place ``obj`` in ``store`` and return a reference to it."""
    key = ObjectKey.new(store.store_id, len(obj))
    ticket = store.put(key, obj)
    recipe = store.recipe()
    if ticket is not None and recipe.store_kind is StoreKind.WIDE_AREA:
        recipe = ResolutionRecipe(
            recipe.store_kind, recipe.store_id, recipe.address, recipe.root, key.key
        )
    return Reference(key, recipe, digest(obj))


class ResolveCache:
    """Per-site LRU cache of resolved targets, keyed by object key.

    Concurrent first resolves of one key share a single store fetch.
    """

    def __init__(self, registry, capacity_bytes: int = DEFAULT_CACHE_BYTES):
        self.registry = registry
        self.capacity_bytes = capacity_bytes
        self._data: OrderedDict[ObjectKey, bytes] = OrderedDict()
        self._used = 0
        self._lock = threading.Lock()
        self._inflight: dict[ObjectKey, threading.Lock] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def lookup(self, key: ObjectKey) -> bytes | None:
        with self._lock:
            data = self._data.get(key)
            if data is not None:
                self._data.move_to_end(key)
            return data

    def _insert(self, key: ObjectKey, data: bytes) -> None:
        if len(data) > self.capacity_bytes:
            return
        with self._lock:
            if key in self._data:
                return
            self._data[key] = data
            self._used += len(data)
            while self._used > self.capacity_bytes:
                _, old = self._data.popitem(last=False)
                self._used -= len(old)
                self.evictions += 1

    def _key_lock(self, key: ObjectKey) -> threading.Lock:
        with self._lock:
            lk = self._inflight.get(key)
            if lk is None:
                lk = self._inflight[key] = threading.Lock()
            return lk

    def fetch(self, ref: Reference) -> bytes:
        data = self.lookup(ref.object_key)
        if data is not None:
            with self._lock:
                self.hits += 1
            return data
        lk = self._key_lock(ref.object_key)
        with lk:
            data = self.lookup(ref.object_key)
            if data is not None:
                with self._lock:
                    self.hits += 1
                return data
            store = self.registry.store_for(ref)
            data = store.get(ref.object_key)
            if digest(data) != ref.content_digest:
                raise IntegrityError(f"digest mismatch for key {ref.object_key.key}")
            with self._lock:
                self.misses += 1
            self._insert(ref.object_key, data)
        with self._lock:
            self._inflight.pop(ref.object_key, None)
        return data

    def __len__(self) -> int:
        return len(self._data)

    @property
    def used_bytes(self) -> int:
        return self._used


def resolve(ref: Reference, cache: ResolveCache) -> bytes:
    """Return the target bytes of ``ref``, fetching through ``cache``."""
    return cache.fetch(ref)


def scan_and_proxy(payload: TaskPayload, policy: ProxyPolicy, topic: str, registry) -> TaskPayload:
    """Replace inline fields larger than the topic threshold with references."""
    rule = policy.rule_for(topic)
    if not math.isfinite(rule.threshold_bytes) or not payload.fields:
        return payload
    out: list[tuple[str, Value]] = []
    stored: list[Reference] = []
    store = None
    for name, value in payload.fields:
        if isinstance(value, Reference) or not rule.should_proxy(len(value)):
            out.append((name, value))
            continue
        try:
            if store is None:
                store = registry.store(rule.store_id)
            ref = proxy(bytes(value), store)
        except Exception as exc:
            _cleanup(stored, registry)
            raise ProxyAbortedError(name, exc, stored) from exc
        stored.append(ref)
        out.append((name, ref))
    return TaskPayload(tuple(out), dict(payload.metadata))


def _cleanup(refs: Iterable[Reference], registry) -> None:
    for ref in refs:
        try:
            registry.store_for(ref).delete(ref.object_key)
        except Exception:  # best effort
            log.warning("cleanup of %s failed", ref.object_key.key, exc_info=True)


def restore(payload: TaskPayload, cache: ResolveCache) -> TaskPayload:
    """Materialize every reference field of ``payload``."""
    if not payload.references():
        return payload
    out = []
    for name, value in payload.fields:
        if isinstance(value, Reference):
            try:
                value = resolve(value, cache)
            except (FabricError, OSError) as exc:
                raise RestoreError(name, exc) from exc
        out.append((name, value))
    return TaskPayload(tuple(out), dict(payload.metadata))


__all__ = [
    "ObjectKey",
    "Reference",
    "ResolutionRecipe",
    "StoreKind",
    "ProxyRule",
    "ProxyPolicy",
    "NEVER_PROXY",
    "TaskPayload",
    "ResolveCache",
    "proxy",
    "resolve",
    "scan_and_proxy",
    "restore",
    "digest",
    "NotFoundError",
    "StoreUnavailableError",
]
