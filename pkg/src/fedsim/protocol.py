"""Binary wire protocol for remote training and service discovery.

Frame layout (all integers little-endian):

    magic   2 bytes  0x46 0x4C ("FL")
    version u8       1
    type    u8       message type
    length  u32      payload byte count, capped at 64 MiB
    payload length bytes

Payload encodings per type (str = u16 length + UTF-8 bytes, floats are
IEEE-754 little-endian; "rest" fields consume the remainder of the payload):

     1 REGISTER       client_id str | listen_addr str | ttl_s u32
     2 ACK            empty (acknowledges REGISTER / HEARTBEAT / METRICS / STOP)
     3 LIST_CLIENTS   empty
     4 CLIENT_LIST    count u32 | count x (client_id str | addr str)
     5 HEARTBEAT      client_id str
     6 TRAIN_REQUEST  task_id str | round u32 | hyperparams JSON str | update rest
     7 TRAIN_RESULT   client_id str | round u32 | num_samples u32 | train_loss f64 | update rest
     8 TEST_REQUEST   task_id str | round u32 | params rest
     9 TEST_RESULT    loss f64 | accuracy f64 | num_samples u32
    10 METRICS        level u8 (0 task / 1 round / 2 client) | JSON body rest
    11 STOP           empty
    15 ERROR          code u16 | detail str

decode() raises only ProtocolError subclasses, whatever the input bytes.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

from .errors import (
    BadMagicError,
    OversizePayloadError,
    ProtocolError,
    TruncatedFrameError,
    VersionMismatchError,
)

MAGIC = b"\x46\x4c"
VERSION = 1
HEADER = struct.Struct("<2sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024

MSG_REGISTER = 1
MSG_ACK = 2
MSG_LIST_CLIENTS = 3
MSG_CLIENT_LIST = 4
MSG_HEARTBEAT = 5
MSG_TRAIN_REQUEST = 6
MSG_TRAIN_RESULT = 7
MSG_TEST_REQUEST = 8
MSG_TEST_RESULT = 9
MSG_METRICS = 10
MSG_STOP = 11
MSG_ERROR = 15

ERR_BUSY = 1
ERR_PROTOCOL = 2
ERR_INTERNAL = 3

METRICS_TASK = 0
METRICS_ROUND = 1
METRICS_CLIENT = 2


@dataclass(frozen=True)
class Register:
    client_id: str
    listen_addr: str
    ttl_s: int


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class ListClients:
    pass


@dataclass(frozen=True)
class ClientList:
    entries: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Heartbeat:
    client_id: str


@dataclass(frozen=True)
class TrainRequest:
    task_id: str
    round_index: int
    hyperparams: str  # canonical JSON text
    update: bytes


@dataclass(frozen=True)
class TrainResult:
    client_id: str
    round_index: int
    num_samples: int
    train_loss: float
    update: bytes


@dataclass(frozen=True)
class TestRequest:
    task_id: str
    round_index: int
    params: bytes


@dataclass(frozen=True)
class TestResult:
    loss: float
    accuracy: float
    num_samples: int


@dataclass(frozen=True)
class Metrics:
    level: int
    body: str  # JSON text


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    detail: str


Message = (
    Register | Ack | ListClients | ClientList | Heartbeat | TrainRequest
    | TrainResult | TestRequest | TestResult | Metrics | Stop | Error
)


def dumps_json(obj) -> str:
    """Canonical JSON used inside protocol payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError(f"string too long to encode ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedFrameError("payload ended early")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        length = self.u16()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8 in string field: {exc}") from exc

    def rest(self) -> bytes:
        chunk = self.data[self.offset :]
        self.offset = len(self.data)
        return chunk

    def done(self) -> None:
        if self.offset != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.offset} trailing payload bytes")


def _check_u32(value: int, name: str) -> int:
    if not 0 <= value <= 0xFFFFFFFF:
        raise ProtocolError(f"{name} out of u32 range: {value}")
    return value


def _encode_payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Register):
        payload = _pack_str(msg.client_id) + _pack_str(msg.listen_addr)
        payload += struct.pack("<I", _check_u32(msg.ttl_s, "ttl_s"))
        return MSG_REGISTER, payload
    if isinstance(msg, Ack):
        return MSG_ACK, b""
    if isinstance(msg, ListClients):
        return MSG_LIST_CLIENTS, b""
    if isinstance(msg, ClientList):
        payload = struct.pack("<I", _check_u32(len(msg.entries), "entry count"))
        for cid, addr in msg.entries:
            payload += _pack_str(cid) + _pack_str(addr)
        return MSG_CLIENT_LIST, payload
    if isinstance(msg, Heartbeat):
        return MSG_HEARTBEAT, _pack_str(msg.client_id)
    if isinstance(msg, TrainRequest):
        payload = _pack_str(msg.task_id)
        payload += struct.pack("<I", _check_u32(msg.round_index, "round"))
        payload += _pack_str(msg.hyperparams)
        return MSG_TRAIN_REQUEST, payload + msg.update
    if isinstance(msg, TrainResult):
        payload = _pack_str(msg.client_id)
        payload += struct.pack("<I", _check_u32(msg.round_index, "round"))
        payload += struct.pack("<I", _check_u32(msg.num_samples, "num_samples"))
        payload += struct.pack("<d", msg.train_loss)
        return MSG_TRAIN_RESULT, payload + msg.update
    if isinstance(msg, TestRequest):
        payload = _pack_str(msg.task_id)
        payload += struct.pack("<I", _check_u32(msg.round_index, "round"))
        return MSG_TEST_REQUEST, payload + msg.params
    if isinstance(msg, TestResult):
        payload = struct.pack("<dd", msg.loss, msg.accuracy)
        payload += struct.pack("<I", _check_u32(msg.num_samples, "num_samples"))
        return MSG_TEST_RESULT, payload
    if isinstance(msg, Metrics):
        if not 0 <= msg.level <= 2:
            raise ProtocolError(f"metrics level out of range: {msg.level}")
        return MSG_METRICS, bytes([msg.level]) + msg.body.encode("utf-8")
    if isinstance(msg, Stop):
        return MSG_STOP, b""
    if isinstance(msg, Error):
        if not 0 <= msg.code <= 0xFFFF:
            raise ProtocolError(f"error code out of u16 range: {msg.code}")
        return MSG_ERROR, struct.pack("<H", msg.code) + _pack_str(msg.detail)
    raise ProtocolError(f"cannot encode object of type {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    msg_type, payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizePayloadError(f"payload of {len(payload)} bytes exceeds cap")
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if msg_type == MSG_REGISTER:
        msg = Register(client_id=r.string(), listen_addr=r.string(), ttl_s=r.u32())
        r.done()
        return msg
    if msg_type == MSG_ACK:
        r.done()
        return Ack()
    if msg_type == MSG_LIST_CLIENTS:
        r.done()
        return ListClients()
    if msg_type == MSG_CLIENT_LIST:
        count = r.u32()
        if count > len(payload):  # every entry needs at least 4 bytes
            raise ProtocolError(f"implausible client list count: {count}")
        entries = tuple((r.string(), r.string()) for _ in range(count))
        r.done()
        return ClientList(entries=entries)
    if msg_type == MSG_HEARTBEAT:
        msg = Heartbeat(client_id=r.string())
        r.done()
        return msg
    if msg_type == MSG_TRAIN_REQUEST:
        return TrainRequest(
            task_id=r.string(), round_index=r.u32(), hyperparams=r.string(), update=r.rest()
        )
    if msg_type == MSG_TRAIN_RESULT:
        return TrainResult(
            client_id=r.string(),
            round_index=r.u32(),
            num_samples=r.u32(),
            train_loss=r.f64(),
            update=r.rest(),
        )
    if msg_type == MSG_TEST_REQUEST:
        return TestRequest(task_id=r.string(), round_index=r.u32(), params=r.rest())
    if msg_type == MSG_TEST_RESULT:
        msg = TestResult(loss=r.f64(), accuracy=r.f64(), num_samples=r.u32())
        r.done()
        return msg
    if msg_type == MSG_METRICS:
        level = r.u8()
        if level > 2:
            raise ProtocolError(f"metrics level out of range: {level}")
        try:
            body = r.rest().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"metrics body is not UTF-8: {exc}") from exc
        return Metrics(level=level, body=body)
    if msg_type == MSG_STOP:
        r.done()
        return Stop()
    if msg_type == MSG_ERROR:
        code = r.u16()
        msg = Error(code=code, detail=r.string())
        r.done()
        return msg
    raise ProtocolError(f"unknown message type: {msg_type}")


def decode(frame: bytes) -> Message:
    """Decode one complete frame; raises ProtocolError subclasses only."""
    if len(frame) < HEADER.size:
        raise TruncatedFrameError(f"frame of {len(frame)} bytes is shorter than the header")
    magic, version, msg_type, length = HEADER.unpack_from(frame, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic bytes: {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported protocol version: {version}")
    if length > MAX_PAYLOAD:
        raise OversizePayloadError(f"declared payload of {length} bytes exceeds cap")
    payload = frame[HEADER.size :]
    if len(payload) < length:
        raise TruncatedFrameError(f"payload has {len(payload)} of {length} declared bytes")
    if len(payload) > length:
        raise ProtocolError(f"{len(payload) - length} bytes after declared payload")
    return _decode_payload(msg_type, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        try:
            part = sock.recv(n - len(chunks))
        except ConnectionResetError as exc:
            raise TruncatedFrameError(f"connection reset mid-frame: {exc}") from exc
        if not part:
            raise TruncatedFrameError("connection closed mid-frame")
        chunks += part
    return bytes(chunks)


def read_frame(sock: socket.socket) -> Message:
    """Read one frame from a stream socket and decode it."""
    header = _recv_exact(sock, HEADER.size)
    magic, version, _msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic bytes: {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported protocol version: {version}")
    if length > MAX_PAYLOAD:
        raise OversizePayloadError(f"declared payload of {length} bytes exceeds cap")
    return decode(header + _recv_exact(sock, length))


def write_frame(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))
