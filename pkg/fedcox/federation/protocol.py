"""Wire format shared by the coordinator and the centers.

A frame is ``[u32 length][u8 version][u8 msg_type][payload]`` with every
integer little-endian. The payload is ``[u32 round][u8 n_arrays]`` followed by
each array as ``[u8 ndim][u32 dim]*ndim[f64 data]`` and finally
``[u32 text_len][utf-8 text]``. `length` counts every byte after the prefix.
"""

import json
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from fedcox.errors import (
    PrivacyViolationError,
    ProtocolError,
    TruncatedFrameError,
    UnknownMessageTypeError,
    VersionMismatchError,
)

VERSION = 1
MAX_MESSAGE_SIZE = 1 << 30

LENGTH = struct.Struct("<I")
HEADER = struct.Struct("<BB")
ROUND = struct.Struct("<IB")
U8 = struct.Struct("<B")
U32 = struct.Struct("<I")
F64 = np.dtype("<f8")


class MessageType(IntEnum):
    GRAD_REQUEST = 1
    GRAD_REPLY = 2
    OMEGA_REQUEST = 3
    OMEGA_REPLY = 4
    SCALAR_REPLY = 5
    HAZARD_REQUEST = 6
    HAZARD_REPLY = 7
    ERROR = 8


class SolveKind(IntEnum):
    """Sub-command carried in the first array of an omega request."""

    OMEGA = 0
    W = 1
    LINEAR_QUADFORM = 2
    NU_QUADFORM = 3
    COLUMN_SUMS = 4
    CENTER = 5


def _frozen(array) -> np.ndarray:
    view = np.asarray(array, dtype=float).view()
    view.setflags(write=False)
    return view


@dataclass(frozen=True, eq=False)
class Message:
    kind: MessageType
    round: int = 0
    arrays: tuple = ()
    text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageType(self.kind))
        object.__setattr__(self, "arrays", tuple(_frozen(a) for a in self.arrays))

    @property
    def n_floats(self) -> int:
        return sum(a.size for a in self.arrays)

    @property
    def size(self) -> int:
        """Encoded frame size in bytes, prefix included."""
        body = HEADER.size + ROUND.size + U32.size + len(self.text.encode("utf-8"))
        for a in self.arrays:
            body += U8.size + U32.size * a.ndim + F64.itemsize * a.size
        return LENGTH.size + body

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.round == other.round
            and self.text == other.text
            and len(self.arrays) == len(other.arrays)
            and all(
                a.shape == b.shape and a.astype(F64).tobytes() == b.astype(F64).tobytes()
                for a, b in zip(self.arrays, other.arrays)
            )
        )

    __hash__ = None

    @classmethod
    def grad_request(cls, round: int, betas) -> "Message":
        return cls(MessageType.GRAD_REQUEST, round, (np.atleast_2d(betas),))

    @classmethod
    def error(cls, text: str, round: int = 0) -> "Message":
        return cls(MessageType.ERROR, round, (), text)


def encode_message(msg: Message) -> bytes:
    parts = [HEADER.pack(VERSION, int(msg.kind)), ROUND.pack(msg.round, len(msg.arrays))]
    for a in msg.arrays:
        parts.append(U8.pack(a.ndim))
        parts.extend(U32.pack(d) for d in a.shape)
        parts.append(np.ascontiguousarray(a, dtype=F64).tobytes())
    text = msg.text.encode("utf-8")
    parts.append(U32.pack(len(text)))
    parts.append(text)
    body = b"".join(parts)
    if len(body) > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {len(body)} bytes")
    return LENGTH.pack(len(body)) + body


class _Reader:
    def __init__(self, buffer: bytes, offset: int):
        self.buffer = buffer
        self.offset = offset

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.buffer):
            raise TruncatedFrameError(
                f"frame ends after {len(self.buffer)} bytes, needed {end}"
            )
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def decode_message(data: bytes) -> Message:
    if len(data) < LENGTH.size:
        raise TruncatedFrameError("frame shorter than its length prefix")
    (length,) = LENGTH.unpack_from(data)
    if length != len(data) - LENGTH.size:
        raise TruncatedFrameError(
            f"length prefix says {length} bytes, frame carries {len(data) - LENGTH.size}"
        )

    reader = _Reader(data, LENGTH.size)
    version, kind = reader.unpack(HEADER)
    if version != VERSION:
        raise VersionMismatchError(f"expected protocol version {VERSION}, got {version}")
    try:
        kind = MessageType(kind)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type {kind}") from None

    round_, n_arrays = reader.unpack(ROUND)
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = reader.unpack(U8)
        shape = tuple(reader.unpack(U32)[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * F64.itemsize)
        arrays.append(np.frombuffer(raw, dtype=F64).reshape(shape).astype(float))
    (text_len,) = reader.unpack(U32)
    text = reader.take(text_len).decode("utf-8")
    if reader.offset != len(data):
        raise ProtocolError(f"{len(data) - reader.offset} trailing bytes in frame")
    return Message(kind, round_, tuple(arrays), text)


def recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("Peer closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def write_frame(sock: socket.socket, msg: Message) -> int:
    frame = encode_message(msg)
    sock.sendall(frame)
    return len(frame)


def read_frame(sock: socket.socket) -> Message:
    prefix = recv_exact(sock, LENGTH.size)
    (length,) = LENGTH.unpack(prefix)
    if length > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {length} bytes")
    return decode_message(prefix + recv_exact(sock, length))


def encode_json_line(msg: Message) -> str:
    """Debug rendering of a frame; floats are 17-significant-digit strings."""
    record = {
        "version": VERSION,
        "type": msg.kind.name.lower(),
        "round": msg.round,
        "arrays": [
            {"shape": list(a.shape), "data": [format(v, ".17g") for v in a.ravel().tolist()]}
            for a in msg.arrays
        ],
        "text": msg.text,
    }
    return json.dumps(record) + "\n"


def decode_json_line(line: str) -> Message:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise TruncatedFrameError(f"malformed json frame: {e}") from None
    if record.get("version") != VERSION:
        raise VersionMismatchError(
            f"expected protocol version {VERSION}, got {record.get('version')}"
        )
    try:
        kind = MessageType[str(record["type"]).upper()]
    except KeyError:
        raise UnknownMessageTypeError(f"unknown message type {record.get('type')}") from None
    arrays = tuple(
        np.array([float(v) for v in a["data"]], dtype=float).reshape(a["shape"])
        for a in record.get("arrays", [])
    )
    return Message(kind, int(record.get("round", 0)), arrays, record.get("text", ""))


MAX_BATCH = 4


def check_aggregate_only(msg: Message) -> None:
    """Enforce the payload schema: vectors and scalars only, plus small gradient batches.

    Matrices are accepted only as gradient batches of at most MAX_BATCH rows, so
    no frame can carry subject-level covariate rows or a p x p Hessian.
    """
    for a in msg.arrays:
        if a.ndim > 2:
            raise PrivacyViolationError(f"{msg.kind.name} carries a {a.ndim}-d array")
        if a.ndim == 2 and (
            msg.kind not in (MessageType.GRAD_REQUEST, MessageType.GRAD_REPLY)
            or a.shape[0] > MAX_BATCH
        ):
            raise PrivacyViolationError(
                f"{msg.kind.name} carries a {a.shape} matrix; only gradient batches of "
                f"at most {MAX_BATCH} rows may be two-dimensional"
            )

