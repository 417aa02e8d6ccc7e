"""Binary encoding helpers shared by references, store and relay protocols.

Conventions (all integers little-endian):

* kv section: ``u16 count`` then per pair ``u16 klen, key, u32 vlen, value``
  with UTF-8 keys and values.
* blob section: ``u16 count`` then per blob ``u64 len, bytes``.
* frame: ``u32 length`` covering ``u8 type`` plus body.
"""

from __future__ import annotations

import socket
import struct
from typing import Mapping

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class WireError(ValueError):
    """Malformed binary record."""


class Reader:
    """Cursor over a bytes-like buffer."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes | memoryview, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if n < 0 or end > len(self.buf):
            raise WireError(f"truncated record: need {n} bytes at offset {self.pos}")
        view = self.buf[self.pos:end]
        self.pos = end
        return view

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def u8(v: int) -> bytes:
    return bytes((v,))


def u16(v: int) -> bytes:
    return _U16.pack(v)


def u32(v: int) -> bytes:
    return _U32.pack(v)


def u64(v: int) -> bytes:
    return _U64.pack(v)


def encode_kv(pairs: Mapping[str, object]) -> bytes:
    parts = [u16(len(pairs))]
    for k, v in pairs.items():
        kb = str(k).encode()
        vb = str(v).encode()
        parts += [u16(len(kb)), kb, u32(len(vb)), vb]
    return b"".join(parts)


def decode_kv(reader: Reader) -> dict[str, str]:
    out: dict[str, str] = {}
    for _ in range(reader.u16()):
        k = bytes(reader.take(reader.u16())).decode()
        v = bytes(reader.take(reader.u32())).decode()
        out[k] = v
    return out


def encode_blobs(blobs: list[bytes]) -> bytes:
    parts = [u16(len(blobs))]
    for b in blobs:
        parts += [u64(len(b)), b]
    return b"".join(parts)


def decode_blobs(reader: Reader) -> list[bytes]:
    return [bytes(reader.take(reader.u64())) for _ in range(reader.u16())]


def encode_body(kv: Mapping[str, object] | None = None, blobs: list[bytes] | None = None) -> bytes:
    return encode_kv(kv or {}) + encode_blobs(blobs or [])


def decode_body(data: bytes | memoryview) -> tuple[dict[str, str], list[bytes]]:
    r = Reader(data)
    kv = decode_kv(r)
    blobs = decode_blobs(r)
    return kv, blobs


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("socket closed by peer")
        got += k
    return bytes(buf)


def send_frame(sock: socket.socket, msg_type: int, body: bytes) -> None:
    sock.sendall(u32(len(body) + 1) + u8(msg_type) + body)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length = _U32.unpack(recv_exact(sock, 4))[0]
    if length < 1:
        raise WireError("empty frame")
    data = recv_exact(sock, length)
    return data[0], data[1:]
