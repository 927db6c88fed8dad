"""Bit-exact wire forms: parameter payloads, stream framing, UDP chunks.

All integers are big-endian; floats are big-endian IEEE-754 binary32.
See ``docs/wire-formats.md`` for the byte layouts and hex vectors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class CodecError(ValueError):
    """Malformed or out-of-range wire data."""


class MessageKind(IntEnum):
    GLOBAL_MODEL = 0x01
    CLIENT_UPDATE = 0x02
    END = 0x03
    HELLO = 0x04


SERVER_ID = 0xFFFF
STREAM_HEADER = struct.Struct(">IBHH")
DEFAULT_MAX_MESSAGE = 256 * 1024 * 1024

CHUNK_MAGIC = b"\xfe\xdc"
CHUNK_HEADER = struct.Struct(">2sHIIIH")
DEFAULT_CHUNK_SIZE = 1400
MIN_CHUNK_SIZE = 64
MAX_CHUNK_SIZE = 65507

END_INFO = struct.Struct(">III")

MODEL_PRESETS = {
    "tiny": 0,
    "vgg5": 4 * 1024 * 1024,
    "vgg8": 16 * 1024 * 1024,
}


def model_preset_bytes(name: str) -> int:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown model preset {name!r}; valid presets: {', '.join(MODEL_PRESETS)}") from None


# -- parameter payloads -----------------------------------------------------

def encode_params(params, inflate_to: int = 0) -> bytes:
    values = np.asarray(params, dtype=np.float32).ravel()
    size = 4 + 4 * values.size
    if inflate_to and inflate_to < size:
        raise CodecError(f"inflate_to={inflate_to} is smaller than the encoded size {size}")
    body = struct.pack(">I", values.size) + values.astype(">f4").tobytes()
    if inflate_to > size:
        body += bytes(inflate_to - size)
    return body


def decode_params(data, expected_count: int | None = None) -> np.ndarray:
    """Inverse of :func:`encode_params`; trailing padding is ignored.

    With ``expected_count`` set, the declared count is ignored and exactly
    that many floats are read from the body. UDP receivers use this after
    zero-fill, where the count field itself may have been lost.
    """
    data = memoryview(data)
    if len(data) < 4:
        raise CodecError(f"parameter payload truncated: {len(data)} bytes, need at least 4")
    count = struct.unpack_from(">I", data)[0] if expected_count is None else expected_count
    if count > (len(data) - 4) // 4:
        if expected_count is None and count > (DEFAULT_MAX_MESSAGE - 4) // 4:
            raise CodecError(f"declared float count {count} exceeds the maximum payload size")
        raise CodecError(
            f"parameter payload truncated: declares {count} floats, "
            f"only {(len(data) - 4) // 4} present")
    return np.frombuffer(data, dtype=">f4", count=count, offset=4).astype(np.float32)


# -- stream messages --------------------------------------------------------

@dataclass(frozen=True)
class WireMessage:
    kind: MessageKind
    round: int
    sender_id: int
    payload: bytes = b""

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", MessageKind(self.kind))
        except ValueError:
            raise CodecError(f"unknown message kind 0x{int(self.kind):02x}") from None
        if not 0 <= self.round <= 0xFFFF:
            raise CodecError(f"round {self.round} does not fit in 16 bits")
        if not 0 <= self.sender_id <= 0xFFFF:
            raise CodecError(f"sender_id {self.sender_id} does not fit in 16 bits")

    def __len__(self) -> int:
        return STREAM_HEADER.size + len(self.payload)


def frame_stream_message(msg: WireMessage) -> bytes:
    n = len(msg.payload)
    if n >= 2**32 - 5:
        raise CodecError(f"payload of {n} bytes is too large to frame")
    return STREAM_HEADER.pack(5 + n, msg.kind, msg.round, msg.sender_id) + bytes(msg.payload)


def framed_size(payload_len: int) -> int:
    return STREAM_HEADER.size + payload_len


class StreamParser:
    """Incremental parser for length-prefixed stream messages.

    Feed arbitrary read fragments; complete messages come out in order.
    """

    def __init__(self, max_length: int = DEFAULT_MAX_MESSAGE):
        self.max_length = max_length
        self._buf = bytearray()

    def feed(self, data) -> list[WireMessage]:
        self._buf += data
        out = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= 4:
            n = int.from_bytes(buf[pos:pos + 4], "big")
            if n > self.max_length:
                raise CodecError(f"declared message length {n} exceeds maximum {self.max_length}")
            if n < 5:
                raise CodecError(f"declared message length {n} is shorter than the 5-byte header")
            if len(buf) - pos < 4 + n:
                break
            kind = buf[pos + 4]
            if kind not in MessageKind._value2member_map_:
                raise CodecError(f"unknown message kind 0x{kind:02x}")
            rnd, sender = struct.unpack_from(">HH", buf, pos + 5)
            out.append(WireMessage(MessageKind(kind), rnd, sender, bytes(buf[pos + 9:pos + 4 + n])))
            pos += 4 + n
        if pos:
            del buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


def parse_stream_message(data) -> WireMessage:
    """Parse exactly one complete framed message."""
    parser = StreamParser()
    msgs = parser.feed(data)
    if len(msgs) != 1 or parser.buffered:
        raise CodecError("expected exactly one complete framed message")
    return msgs[0]


# -- UDP chunks -------------------------------------------------------------

@dataclass(frozen=True)
class UdpChunk:
    round: int
    msg_id: int
    chunk_index: int
    total_chunks: int
    payload: bytes

    def __post_init__(self):
        if not self.chunk_index < self.total_chunks:
            raise CodecError(
                f"chunk_index {self.chunk_index} must be below total_chunks {self.total_chunks}")

    def to_bytes(self) -> bytes:
        return CHUNK_HEADER.pack(CHUNK_MAGIC, self.round, self.msg_id, self.chunk_index,
                                 self.total_chunks, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data) -> "UdpChunk":
        if len(data) < CHUNK_HEADER.size:
            raise CodecError(f"datagram of {len(data)} bytes is shorter than the chunk header")
        magic, rnd, msg_id, index, total, plen = CHUNK_HEADER.unpack_from(data)
        if magic != CHUNK_MAGIC:
            raise CodecError(f"bad chunk magic {magic.hex()}")
        if len(data) != CHUNK_HEADER.size + plen:
            raise CodecError(
                f"chunk declares {plen} payload bytes, datagram carries {len(data) - CHUNK_HEADER.size}")
        return cls(rnd, msg_id, index, total, bytes(data[CHUNK_HEADER.size:]))

    def wire_size(self) -> int:
        return CHUNK_HEADER.size + len(self.payload)


@dataclass(frozen=True)
class EndInfo:
    msg_id: int
    total_chunks: int
    total_payload_len: int

    def to_bytes(self) -> bytes:
        return END_INFO.pack(self.msg_id, self.total_chunks, self.total_payload_len)

    @classmethod
    def from_bytes(cls, data) -> "EndInfo":
        if len(data) != END_INFO.size:
            raise CodecError(f"END payload must be {END_INFO.size} bytes, got {len(data)}")
        return cls(*END_INFO.unpack(data))


def chunk_count(payload_len: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> int:
    return max(1, math.ceil(payload_len / chunk_size))


def chunks_wire_size(payload_len: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> int:
    return payload_len + CHUNK_HEADER.size * chunk_count(payload_len, chunk_size)


def chunk_payload(payload, round: int, msg_id: int,
                  chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[UdpChunk]:
    if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
        raise CodecError(
            f"chunk_size {chunk_size} outside [{MIN_CHUNK_SIZE}, {MAX_CHUNK_SIZE}]")
    payload = bytes(payload)
    total = chunk_count(len(payload), chunk_size)
    return [UdpChunk(round, msg_id, i, total, payload[i * chunk_size:(i + 1) * chunk_size])
            for i in range(total)]


def reassemble(chunks, end: EndInfo) -> tuple[bytes, int]:
    """Rebuild a chunked payload, zero-filling the ranges of absent chunks.

    Returns ``(payload, missing)``; the payload always has
    ``end.total_payload_len`` bytes.
    """
    by_index: dict[int, UdpChunk] = {}
    for ch in chunks:
        if ch.msg_id != end.msg_id:
            raise CodecError(f"chunk for msg_id {ch.msg_id} passed to reassembly of {end.msg_id}")
        if ch.total_chunks != end.total_chunks:
            raise CodecError(
                f"chunk declares total_chunks={ch.total_chunks}, END says {end.total_chunks}")
        by_index.setdefault(ch.chunk_index, ch)

    out = bytearray(end.total_payload_len)
    if by_index:
        last = end.total_chunks - 1
        sizes = {len(c.payload) for i, c in by_index.items() if i != last}
        if len(sizes) > 1:
            raise CodecError(f"inconsistent chunk sizes {sorted(sizes)}")
        if sizes:
            size = sizes.pop()
        elif last > 0:
            size = (end.total_payload_len - len(by_index[last].payload)) // last
        else:
            size = end.total_payload_len
        for i, c in by_index.items():
            lo = i * size
            if lo + len(c.payload) > end.total_payload_len:
                raise CodecError(f"chunk {i} overruns total_payload_len {end.total_payload_len}")
            out[lo:lo + len(c.payload)] = c.payload
    return bytes(out), end.total_chunks - len(by_index)
