"""Length-prefixed binary framing for the cluster wire protocol.

Frame layout (little-endian, 22-byte header):

    magic   4s   'IMCE'
    version u8   protocol version (currently 1)
    type    u8   message type
    channel u32  S-link channel id (0 on control connections)
    seq     u64  per-(connection, channel) strictly increasing sequence
    len     u32  payload byte count
    payload len bytes

Control payloads (Hello/Configure/Ack/Error/Stats) are UTF-8 JSON.  Tensor
and Infer payloads are binary: u16 name length, name bytes, raw INT8 data.
Weights payloads are binary: u32 meta length, JSON meta, raw data.
"""
from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"IMCE"
VERSION = 1
HEADER = struct.Struct("<4sBBIQI")
HEADER_SIZE = HEADER.size  # 22
MAX_PAYLOAD = 64 * 1024 * 1024


class MsgType(IntEnum):
    Hello = 1
    Configure = 2
    Weights = 3
    Infer = 4
    Tensor = 5
    Stats = 6
    Ack = 7
    Error = 8
    Shutdown = 9


class ProtocolError(Exception):
    """Malformed frame; the connection should be dropped."""


@dataclass(frozen=True)
class ComMessage:
    type: MsgType
    channel_id: int = 0
    seq: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        header = HEADER.pack(MAGIC, VERSION, int(self.type), self.channel_id, self.seq, len(self.payload))
        return header + self.payload

    # -- payload helpers --------------------------------------------------

    def json(self) -> dict:
        try:
            doc = json.loads(self.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ProtocolError(f"{self.type.name} payload is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ProtocolError(f"{self.type.name} payload must be a JSON object")
        return doc

    @classmethod
    def with_json(cls, type: MsgType, doc: dict, channel_id: int = 0, seq: int = 0) -> "ComMessage":
        return cls(type, channel_id, seq, json.dumps(doc, sort_keys=True).encode("utf-8"))


def decode_header(header: bytes) -> tuple[MsgType, int, int, int]:
    """-> (type, channel_id, seq, payload_len); raises ProtocolError."""
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"short header: {len(header)} bytes")
    magic, version, mtype, channel_id, seq, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        mt = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return mt, channel_id, seq, length


def decode(buf: bytes) -> ComMessage:
    mt, channel_id, seq, length = decode_header(buf[:HEADER_SIZE])
    if len(buf) != HEADER_SIZE + length:
        raise ProtocolError(f"frame length {len(buf)} != header + {length}")
    return ComMessage(mt, channel_id, seq, buf[HEADER_SIZE:])


# ---------------------------------------------------------------------------
# Socket helpers
# ---------------------------------------------------------------------------


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> ComMessage | None:
    """Blocking read of one frame; None on clean EOF."""
    header = recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    mt, channel_id, seq, length = decode_header(header)
    payload = recv_exact(sock, length) if length else b""
    if length and payload is None:
        raise ConnectionError("connection closed before payload")
    return ComMessage(mt, channel_id, seq, payload or b"")


def send_message(sock: socket.socket, msg: ComMessage) -> int:
    buf = msg.encode()
    sock.sendall(buf)
    return len(buf)


# ---------------------------------------------------------------------------
# Tensor / weights payload packing
# ---------------------------------------------------------------------------

_NAME_LEN = struct.Struct("<H")
_META_LEN = struct.Struct("<I")


def pack_tensor(name: str, data: bytes) -> bytes:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise ProtocolError("tensor name too long")
    return _NAME_LEN.pack(len(nb)) + nb + data


def unpack_tensor(payload: bytes) -> tuple[str, bytes]:
    if len(payload) < _NAME_LEN.size:
        raise ProtocolError("tensor payload too short")
    (nlen,) = _NAME_LEN.unpack(payload[: _NAME_LEN.size])
    end = _NAME_LEN.size + nlen
    if len(payload) < end:
        raise ProtocolError("tensor payload shorter than its name field")
    try:
        name = payload[_NAME_LEN.size : end].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError(f"tensor name is not UTF-8: {e}") from e
    return name, payload[end:]


def pack_weights(meta: dict, data: bytes) -> bytes:
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    return _META_LEN.pack(len(mb)) + mb + data


def unpack_weights(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < _META_LEN.size:
        raise ProtocolError("weights payload too short")
    (mlen,) = _META_LEN.unpack(payload[: _META_LEN.size])
    end = _META_LEN.size + mlen
    if len(payload) < end:
        raise ProtocolError("weights payload shorter than its meta field")
    try:
        meta = json.loads(payload[_META_LEN.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"weights meta is not valid JSON: {e}") from e
    return meta, payload[end:]
