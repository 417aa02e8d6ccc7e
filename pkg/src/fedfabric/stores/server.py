"""Length-prefixed binary protocol for socket-served stores.

Request:  ``u8 opcode | 16B key | u64 LE length | payload``
Response: ``u8 status | u64 LE length | payload``

PUT carries the object bytes and answers with the ticket as a kv section.
GET answers with the object bytes (blocking on wide-area transfers), EXISTS
with one byte, STATS and TICKET with kv sections.  The key is all zeros for
STATS.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading

from .. import wire
from ..errors import (
    CapacityExceededError,
    FabricError,
    NotFoundError,
    StoreUnavailableError,
    TransferError,
)
from ..refcore import ObjectKey, ResolutionRecipe, StoreKind
from .model import Store, StoreStats, TransferTicket

log = logging.getLogger(__name__)

OP_PUT, OP_GET, OP_EXISTS, OP_DEL, OP_STATS, OP_TICKET = 1, 2, 3, 4, 5, 6

ST_OK, ST_NOT_FOUND, ST_CAPACITY, ST_TRANSFER_FAILED, ST_BAD_REQUEST, ST_ERROR = range(6)

_REQ = struct.Struct("<B16sQ")
_RESP = struct.Struct("<BQ")
ZERO_KEY = b"\x00" * 16


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        store: Store = self.server.store
        while True:
            try:
                op, key, length = _REQ.unpack(wire.recv_exact(sock, _REQ.size))
                payload = wire.recv_exact(sock, length) if length else b""
            except (ConnectionError, OSError):
                return
            status, body = self._dispatch(store, op, key, payload)
            try:
                sock.sendall(_RESP.pack(status, len(body)) + body)
            except OSError:
                return

    def _dispatch(self, store: Store, op: int, raw_key: bytes, payload: bytes) -> tuple[int, bytes]:
        # the server does not know object sizes up front; GET trusts the stored bytes
        size = len(payload) if op == OP_PUT else 0
        key = ObjectKey(store.store_id, raw_key.hex(), size)
        try:
            if op == OP_PUT:
                ticket = store.put(key, payload)
                return ST_OK, wire.encode_kv(ticket.to_kv())
            if op == OP_GET:
                return ST_OK, store.get(key)
            if op == OP_EXISTS:
                return ST_OK, b"\x01" if store.exists(key) else b"\x00"
            if op == OP_DEL:
                store.delete(key)
                return ST_OK, b""
            if op == OP_STATS:
                return ST_OK, wire.encode_kv(store.stats().to_kv())
            if op == OP_TICKET:
                ticket = store.ticket(key)
                if ticket is None:
                    return ST_NOT_FOUND, b""
                return ST_OK, wire.encode_kv(ticket.to_kv())
            return ST_BAD_REQUEST, f"unknown opcode {op}".encode()
        except NotFoundError as exc:
            return ST_NOT_FOUND, str(exc).encode()
        except CapacityExceededError as exc:
            return ST_CAPACITY, str(exc).encode()
        except TransferError as exc:
            return ST_TRANSFER_FAILED, str(exc).encode()
        except (ValueError, FabricError) as exc:
            return ST_BAD_REQUEST, str(exc).encode()
        except Exception as exc:  # keep the server alive
            log.exception("store op %d failed", op)
            return ST_ERROR, repr(exc).encode()


class StoreServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store: Store, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name=f"store-{self.store.store_id}", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


class RemoteStore(Store):
    """Client for a :class:`StoreServer`; one connection per calling thread."""

    def __init__(self, store_id: str, kind: StoreKind, address: str, timeout: float | None = 600.0):
        self.store_id = store_id
        self.kind = StoreKind(kind)
        self.address = address
        self.timeout = timeout
        self._local = threading.local()
        self._all: list[socket.socket] = []
        self._lock = threading.Lock()

    def _conn(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            try:
                sock = socket.create_connection(parse_address(self.address), timeout=self.timeout)
            except OSError as exc:
                raise StoreUnavailableError(f"{self.store_id} at {self.address}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
            with self._lock:
                self._all.append(sock)
        return sock

    def _drop(self) -> None:
        sock = getattr(self._local, "sock", None)
        self._local.sock = None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def _call(self, op: int, key: bytes, payload: bytes = b"") -> bytes:
        for attempt in (0, 1):
            sock = self._conn()
            try:
                sock.sendall(_REQ.pack(op, key, len(payload)))
                if payload:
                    sock.sendall(payload)
                status, length = _RESP.unpack(wire.recv_exact(sock, _RESP.size))
                body = wire.recv_exact(sock, length) if length else b""
                break
            except OSError as exc:
                self._drop()
                if attempt:
                    raise StoreUnavailableError(f"{self.store_id} at {self.address}: {exc}") from exc
        if status == ST_OK:
            return body
        msg = body.decode(errors="replace")
        if status == ST_NOT_FOUND:
            raise NotFoundError(msg or f"{self.store_id}: not found")
        if status == ST_CAPACITY:
            raise CapacityExceededError(msg)
        if status == ST_TRANSFER_FAILED:
            raise TransferError(msg)
        if status == ST_BAD_REQUEST:
            raise ValueError(msg)
        raise FabricError(f"{self.store_id}: server error {msg}")

    def put(self, key: ObjectKey, data: bytes) -> TransferTicket:
        if len(data) != key.size_bytes:
            raise ValueError(f"data length {len(data)} != key.size_bytes {key.size_bytes}")
        body = self._call(OP_PUT, key.key_bytes, data)
        return TransferTicket.from_kv(wire.decode_kv(wire.Reader(body)))

    def get(self, key: ObjectKey) -> bytes:
        return self._call(OP_GET, key.key_bytes)

    def exists(self, key: ObjectKey) -> bool:
        return self._call(OP_EXISTS, key.key_bytes) == b"\x01"

    def delete(self, key: ObjectKey) -> None:
        self._call(OP_DEL, key.key_bytes)

    def stats(self) -> StoreStats:
        return StoreStats.from_kv(wire.decode_kv(wire.Reader(self._call(OP_STATS, ZERO_KEY))))

    def ticket(self, key: ObjectKey) -> TransferTicket | None:
        try:
            body = self._call(OP_TICKET, key.key_bytes)
        except NotFoundError:
            return None
        return TransferTicket.from_kv(wire.decode_kv(wire.Reader(body)))

    def recipe(self) -> ResolutionRecipe:
        return ResolutionRecipe(self.kind, self.store_id, address=self.address)

    def close(self) -> None:
        with self._lock:
            socks, self._all = self._all, []
        for s in socks:
            try:
                s.close()
            except OSError:
                pass
