"""Socket front-end for :class:`RelayCore` and the matching client.

Frames are ``u32 LE length | u8 message type | body`` with bodies built from
the shared kv + blob conventions.  Responses use type ``RESP_OK`` or
``RESP_ERR`` (kv ``code``/``message``).
"""

from __future__ import annotations

import logging
import socket
import socketserver
import statistics
import threading
import time

from .. import wire
from ..clock import now_ns
from ..errors import RELAY_ERRORS, RelayError, RelayUnavailableError
from ..stores.server import parse_address
from . import protocol as P
from .core import RelayConfig, RelayCore
from .protocol import ResultEnvelope, TaskDescriptor, Tier

log = logging.getLogger(__name__)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        core: RelayCore = self.server.core
        while True:
            try:
                msg_type, body = wire.recv_frame(sock)
            except (ConnectionError, OSError, wire.WireError):
                return
            try:
                kv, blobs = self._dispatch(core, msg_type, body)
                resp_type, resp = P.RESP_OK, wire.encode_body(kv, blobs)
            except RelayError as exc:
                resp_type, resp = P.RESP_ERR, wire.encode_body({"code": exc.code, "message": str(exc)})
            except (ValueError, KeyError, wire.WireError) as exc:
                resp_type, resp = P.RESP_ERR, wire.encode_body({"code": "bad-request", "message": str(exc)})
            except Exception as exc:
                log.exception("relay handler failed")
                resp_type, resp = P.RESP_ERR, wire.encode_body({"code": "internal", "message": repr(exc)})
            try:
                wire.send_frame(sock, resp_type, resp)
            except OSError:
                return

    def _dispatch(self, core: RelayCore, msg_type: int, body: bytes):
        kv, blobs = wire.decode_body(body)
        if msg_type == P.REGISTER:
            params = wire.decode_kv(wire.Reader(blobs[0])) if blobs else {}
            return {"function_id": core.register_function(kv["name"], params)}, []
        if msg_type == P.SUBMIT:
            desc = TaskDescriptor.from_bytes(blobs[0], decode_payload=False)
            task_id, tier = core.submit(desc)
            return {"task_id": task_id, "tier": tier.value}, []
        if msg_type == P.FETCH:
            tasks = core.fetch_tasks(
                kv["endpoint_id"], kv["token"], int(kv["max_n"]), float(kv.get("timeout", "0")), decode=False
            )
            return {"count": len(tasks)}, [t.to_bytes() for t in tasks]
        if msg_type == P.POST_RESULT:
            env = ResultEnvelope.from_bytes(blobs[0])
            dup = core.post_result(kv["endpoint_id"], kv["token"], env, raw=blobs[0])
            return {"duplicate": int(dup)}, []
        if msg_type == P.GET_RESULT:
            raw = core.get_result(
                kv.get("task_id") or None, kv.get("client_id"), float(kv.get("timeout", "0"))
            )
            if raw is None:
                return {"pending": 1}, []
            return {"pending": 0}, [raw]
        if msg_type == P.STATS:
            return core.stats(), []
        if msg_type == P.PAIR:
            return {"token": core.pair(kv["endpoint_id"], kv["admin_token"])}, []
        if msg_type == P.CLOCK:
            return {"t_ns": now_ns()}, []
        raise ValueError(f"unknown message type {msg_type}")


class RelayServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: RelayConfig | None = None, core: RelayCore | None = None):
        self.core = core or RelayCore(config)
        cfg = self.core.config
        super().__init__((cfg.host, cfg.port), _Handler)
        self._reaper_stop = threading.Event()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def _reaper(self):
        while not self._reaper_stop.wait(0.25):
            self.core.reap()

    def start(self) -> None:
        threading.Thread(target=self.serve_forever, name="relay", daemon=True).start()
        threading.Thread(target=self._reaper, name="relay-reaper", daemon=True).start()

    def stop(self) -> None:
        self._reaper_stop.set()
        self.shutdown()
        self.server_close()


class RelayClient:
    """Outbound-only client used by task servers, endpoints and admins.

    Each calling thread gets its own connection so long polls do not block
    other callers.
    """

    def __init__(self, address: str, connect_timeout: float = 5.0, io_margin: float = 30.0):
        self.address = address
        self.connect_timeout = connect_timeout
        self.io_margin = io_margin
        self._local = threading.local()
        self._socks: list[socket.socket] = []
        self._lock = threading.Lock()

    def _conn(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            try:
                sock = socket.create_connection(parse_address(self.address), timeout=self.connect_timeout)
            except OSError as exc:
                raise RelayUnavailableError(f"relay at {self.address}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
            with self._lock:
                self._socks.append(sock)
        return sock

    def disconnect(self) -> None:
        """Drop this thread's connection (next call reconnects)."""
        sock = getattr(self._local, "sock", None)
        self._local.sock = None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def close(self) -> None:
        with self._lock:
            socks, self._socks = self._socks, []
        for s in socks:
            try:
                s.close()
            except OSError:
                pass

    def call(self, msg_type: int, kv: dict | None = None, blobs: list[bytes] | None = None, wait: float = 0.0):
        sock = self._conn()
        try:
            sock.settimeout(wait + self.io_margin)
            wire.send_frame(sock, msg_type, wire.encode_body(kv, blobs))
            resp_type, body = wire.recv_frame(sock)
        except (OSError, wire.WireError) as exc:
            self.disconnect()
            raise RelayUnavailableError(f"relay at {self.address}: {exc}") from exc
        rkv, rblobs = wire.decode_body(body)
        if resp_type == P.RESP_ERR:
            cls = RELAY_ERRORS.get(rkv.get("code", ""), RelayError)
            if rkv.get("code") == "bad-request":
                raise ValueError(rkv.get("message", ""))
            raise cls(rkv.get("message", ""))
        return rkv, rblobs

    # -- operations --------------------------------------------------------
    def register_function(self, name: str, body: dict[str, str] | None = None) -> str:
        kv, _ = self.call(P.REGISTER, {"name": name}, [wire.encode_kv(body or {})])
        return kv["function_id"]

    def submit(self, task: TaskDescriptor) -> tuple[str, Tier]:
        kv, _ = self.call(P.SUBMIT, {}, [task.to_bytes()])
        return kv["task_id"], Tier(kv["tier"])

    def fetch_tasks(self, endpoint_id: str, token: str, max_n: int, timeout: float = 0.0) -> list[TaskDescriptor]:
        kv, blobs = self.call(
            P.FETCH,
            {"endpoint_id": endpoint_id, "token": token, "max_n": max_n, "timeout": timeout},
            wait=timeout,
        )
        # payloads are decoded on the worker, where deserialization is timed
        return [TaskDescriptor.from_bytes(b, decode_payload=False) for b in blobs]

    def post_result(self, endpoint_id: str, token: str, envelope: ResultEnvelope, raw: bytes | None = None) -> bool:
        kv, _ = self.call(
            P.POST_RESULT,
            {"endpoint_id": endpoint_id, "token": token},
            [raw if raw is not None else envelope.to_bytes()],
        )
        return kv["duplicate"] == "1"

    def get_result(
        self, task_id: str | None = None, client_id: str | None = None, timeout: float = 0.0
    ) -> ResultEnvelope | None:
        kv = {"timeout": timeout}
        if task_id is not None:
            kv["task_id"] = task_id
        if client_id is not None:
            kv["client_id"] = client_id
        rkv, blobs = self.call(P.GET_RESULT, kv, wait=timeout)
        if rkv["pending"] == "1":
            return None
        return ResultEnvelope.from_bytes(blobs[0])

    def stats(self) -> dict[str, int]:
        kv, _ = self.call(P.STATS)
        return {k: int(v) for k, v in kv.items()}

    def pair(self, endpoint_id: str, admin_token: str) -> str:
        kv, _ = self.call(P.PAIR, {"endpoint_id": endpoint_id, "admin_token": admin_token})
        return kv["token"]

    def clock_offset(self, rounds: int = 16) -> dict[str, float]:
        """NTP-style estimate of ``relay_clock - local_clock`` in ns (median of rounds)."""
        offsets, rtts = [], []
        for _ in range(rounds):
            t0 = now_ns()
            kv, _ = self.call(P.CLOCK)
            t1 = now_ns()
            offsets.append(int(kv["t_ns"]) - (t0 + t1) / 2)
            rtts.append(t1 - t0)
        return {"offset_ns": statistics.median(offsets), "rtt_ns": statistics.median(rtts), "rounds": rounds}

    def wait_ready(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.stats()
                return
            except RelayUnavailableError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
