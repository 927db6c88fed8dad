"""MQTT 3.1.1 subset: packet codecs, broker state machine, blocking client.

QoS 0 only, clean sessions, no retained messages. Topic filters support
exact match and a trailing ``#``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_REMAINING_LENGTH = 268_435_455
MAX_ACCEPTED_LENGTH = 256 * 1024 * 1024


class MqttError(ValueError):
    pass


class ProtocolViolation(MqttError):
    pass


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise MqttError(f"remaining length {n} outside [0, {MAX_REMAINING_LENGTH}]")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_remaining_length(data, offset: int = 0) -> tuple[int, int] | None:
    """Decode a varint at ``offset``; return ``(value, bytes_used)``.

    ``None`` means more bytes are needed.
    """
    value = 0
    mult = 1
    for i in range(4):
        if offset + i >= len(data):
            return None
        byte = data[offset + i]
        value += (byte & 0x7F) * mult
        if not byte & 0x80:
            return value, i + 1
        mult *= 128
    raise MqttError("malformed remaining length: continuation bit set on the 4th byte")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MqttError("string longer than 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


def _read_str(body, pos: int) -> tuple[str, int]:
    if pos + 2 > len(body):
        raise MqttError("truncated string length")
    n = struct.unpack_from(">H", body, pos)[0]
    if pos + 2 + n > len(body):
        raise MqttError("truncated string")
    try:
        return bytes(body[pos + 2:pos + 2 + n]).decode("utf-8"), pos + 2 + n
    except UnicodeDecodeError as exc:
        raise MqttError(f"invalid UTF-8 in string: {exc}") from None


def _packet(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


@dataclass(frozen=True)
class Connect:
    client_id: str
    keepalive: int = 60
    clean_session: bool = True
    packet_type = PacketType.CONNECT

    def encode(self) -> bytes:
        flags = 0x02 if self.clean_session else 0x00
        body = _str("MQTT") + bytes([4, flags]) + struct.pack(">H", self.keepalive) + _str(self.client_id)
        return _packet(PacketType.CONNECT, 0, body)


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    return_code: int = 0
    packet_type = PacketType.CONNACK

    def encode(self) -> bytes:
        return _packet(PacketType.CONNACK, 0, bytes([int(self.session_present), self.return_code]))


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    packet_type = PacketType.PUBLISH

    def __post_init__(self):
        if "#" in self.topic or "+" in self.topic:
            raise MqttError(f"PUBLISH topic {self.topic!r} contains a wildcard")

    def encode(self) -> bytes:
        return _packet(PacketType.PUBLISH, 0, _str(self.topic) + bytes(self.payload))

    def wire_size(self) -> int:
        n = 2 + len(self.topic.encode()) + len(self.payload)
        return 1 + len(encode_remaining_length(n)) + n


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topics: tuple[tuple[str, int], ...]
    packet_type = PacketType.SUBSCRIBE

    def encode(self) -> bytes:
        body = struct.pack(">H", self.packet_id)
        for topic, qos in self.topics:
            body += _str(topic) + bytes([qos])
        return _packet(PacketType.SUBSCRIBE, 0x02, body)


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...] = (0,)
    packet_type = PacketType.SUBACK

    def encode(self) -> bytes:
        return _packet(PacketType.SUBACK, 0, struct.pack(">H", self.packet_id) + bytes(self.return_codes))


@dataclass(frozen=True)
class Pingreq:
    packet_type = PacketType.PINGREQ

    def encode(self) -> bytes:
        return b"\xc0\x00"


@dataclass(frozen=True)
class Pingresp:
    packet_type = PacketType.PINGRESP

    def encode(self) -> bytes:
        return b"\xd0\x00"


@dataclass(frozen=True)
class Disconnect:
    packet_type = PacketType.DISCONNECT

    def encode(self) -> bytes:
        return b"\xe0\x00"


MqttPacket = Connect | Connack | Publish | Subscribe | Suback | Pingreq | Pingresp | Disconnect

_REQUIRED_FLAGS = {
    PacketType.CONNECT: 0, PacketType.CONNACK: 0, PacketType.SUBSCRIBE: 2, PacketType.SUBACK: 0,
    PacketType.PINGREQ: 0, PacketType.PINGRESP: 0, PacketType.DISCONNECT: 0,
}


def decode_packet(first: int, body) -> MqttPacket:
    try:
        ptype = PacketType(first >> 4)
    except ValueError:
        raise MqttError(f"unsupported packet type {first >> 4}") from None
    flags = first & 0x0F
    if ptype == PacketType.PUBLISH:
        if flags & 0x06:
            raise MqttError("only QoS 0 PUBLISH is supported")
        topic, pos = _read_str(body, 0)
        if "#" in topic or "+" in topic:
            raise MqttError(f"PUBLISH topic {topic!r} contains a wildcard")
        return Publish(topic, bytes(body[pos:]))
    if flags != _REQUIRED_FLAGS[ptype]:
        raise MqttError(f"invalid flags 0x{flags:x} for {ptype.name}")
    if ptype == PacketType.CONNECT:
        name, pos = _read_str(body, 0)
        if name != "MQTT" or pos + 4 > len(body):
            raise MqttError(f"unsupported protocol name {name!r}")
        level, cflags = body[pos], body[pos + 1]
        if level != 4:
            raise MqttError(f"unsupported protocol level {level}")
        keepalive = struct.unpack_from(">H", body, pos + 2)[0]
        client_id, pos = _read_str(body, pos + 4)
        return Connect(client_id, keepalive, bool(cflags & 0x02))
    if ptype == PacketType.CONNACK:
        if len(body) != 2:
            raise MqttError("CONNACK body must be 2 bytes")
        return Connack(bool(body[0] & 1), body[1])
    if ptype == PacketType.SUBSCRIBE:
        if len(body) < 2:
            raise MqttError("SUBSCRIBE without packet identifier")
        pid = struct.unpack_from(">H", body)[0]
        pos, topics = 2, []
        while pos < len(body):
            topic, pos = _read_str(body, pos)
            if pos >= len(body):
                raise MqttError("SUBSCRIBE topic without QoS byte")
            topics.append((topic, body[pos]))
            pos += 1
        if not topics:
            raise MqttError("SUBSCRIBE with no topics")
        return Subscribe(pid, tuple(topics))
    if ptype == PacketType.SUBACK:
        if len(body) < 3:
            raise MqttError("SUBACK too short")
        return Suback(struct.unpack_from(">H", body)[0], tuple(body[2:]))
    if body:
        raise MqttError(f"{ptype.name} must have an empty body")
    return {PacketType.PINGREQ: Pingreq, PacketType.PINGRESP: Pingresp,
            PacketType.DISCONNECT: Disconnect}[ptype]()


class MqttParser:
    """Incremental packet parser; remaining length capped at ``max_length``."""

    def __init__(self, max_length: int = MAX_ACCEPTED_LENGTH):
        self.max_length = max_length
        self._buf = bytearray()

    def feed(self, data) -> list[MqttPacket]:
        self._buf += data
        buf = self._buf
        out, pos = [], 0
        while len(buf) - pos >= 2:
            rl = decode_remaining_length(buf, pos + 1)
            if rl is None:
                break
            n, used = rl
            if n > self.max_length:
                raise MqttError(f"remaining length {n} exceeds accepted maximum {self.max_length}")
            start = pos + 1 + used
            if len(buf) < start + n:
                break
            out.append(decode_packet(buf[pos], memoryview(buf)[start:start + n]))
            pos = start + n
        if pos:
            del buf[:pos]
        return out


def decode(data: bytes) -> MqttPacket:
    parser = MqttParser()
    pkts = parser.feed(data)
    if len(pkts) != 1 or parser._buf:
        raise MqttError("expected exactly one complete packet")
    return pkts[0]


def topic_matches(filter_: str, topic: str) -> bool:
    if filter_ == "#":
        return True
    if filter_.endswith("/#"):
        base = filter_[:-2]
        return topic == base or topic.startswith(base + "/")
    return filter_ == topic


@dataclass
class MqttBrokerState:
    sessions: dict = field(default_factory=dict)        # connection -> client id
    subscriptions: dict = field(default_factory=dict)   # connection -> [filters]

    def drop(self, conn) -> None:
        self.sessions.pop(conn, None)
        self.subscriptions.pop(conn, None)


def mqtt_broker_step(state: MqttBrokerState, conn, packet: MqttPacket) -> list[tuple[object, MqttPacket]]:
    """Apply one inbound packet; return the packets to send, per connection.

    Raises :class:`ProtocolViolation` when the connection must be closed; the
    session is removed from ``state`` first.
    """
    if conn not in state.sessions:
        if not isinstance(packet, Connect):
            state.drop(conn)
            raise ProtocolViolation(f"{type(packet).__name__} before CONNECT")
        state.sessions[conn] = packet.client_id
        state.subscriptions[conn] = []
        return [(conn, Connack())]
    if isinstance(packet, Connect):
        state.drop(conn)
        raise ProtocolViolation("second CONNECT on one connection")
    if isinstance(packet, Subscribe):
        for topic, _ in packet.topics:
            if topic not in state.subscriptions[conn]:
                state.subscriptions[conn].append(topic)
        return [(conn, Suback(packet.packet_id, tuple(0 for _ in packet.topics)))]
    if isinstance(packet, Publish):
        return [(other, packet) for other, filters in state.subscriptions.items()
                if any(topic_matches(f, packet.topic) for f in filters)]
    if isinstance(packet, Pingreq):
        return [(conn, Pingresp())]
    if isinstance(packet, Disconnect):
        state.drop(conn)
        return []
    state.drop(conn)
    raise ProtocolViolation(f"client sent server-only packet {type(packet).__name__}")


class MqttClient:
    """Blocking QoS-0 client over a :class:`~flcommbench.channels.StreamChannel`."""

    def __init__(self, channel, client_id: str):
        self.channel = channel
        self.client_id = client_id
        self._parser = MqttParser()
        self._pending: list[MqttPacket] = []
        self._early: list[Publish] = []
        self._next_pid = 1

    def _next_packet(self, timeout):
        while not self._pending:
            data = self.channel.recv(timeout)
            if not data:
                raise ConnectionError(f"broker closed the connection of {self.client_id}")
            self._pending.extend(self._parser.feed(data))
        return self._pending.pop(0)

    def _expect(self, kind, timeout):
        while True:
            pkt = self._next_packet(timeout)
            if isinstance(pkt, kind):
                return pkt
            if isinstance(pkt, Publish):
                self._early.append(pkt)
                continue
            raise ProtocolViolation(f"expected {kind.__name__}, got {type(pkt).__name__}")

    def connect(self, timeout: float = 10.0) -> Connack:
        self.channel.send(Connect(self.client_id).encode())
        ack = self._expect(Connack, timeout)
        if ack.return_code:
            raise ProtocolViolation(f"CONNACK refused with code {ack.return_code}")
        return ack

    def subscribe(self, *topics: str, timeout: float = 10.0) -> Suback:
        pid = self._next_pid
        self._next_pid = pid % 0xFFFF + 1
        self.channel.send(Subscribe(pid, tuple((t, 0) for t in topics)).encode())
        ack = self._expect(Suback, timeout)
        if ack.packet_id != pid:
            raise ProtocolViolation(f"SUBACK for packet {ack.packet_id}, expected {pid}")
        return ack

    def publish(self, topic: str, payload: bytes) -> None:
        self.channel.send(Publish(topic, payload).encode())

    def next_publish(self, timeout: float | None = None) -> Publish:
        if self._early:
            return self._early.pop(0)
        while True:
            pkt = self._next_packet(timeout)
            if isinstance(pkt, Publish):
                return pkt
            if not isinstance(pkt, Pingresp):
                raise ProtocolViolation(f"unexpected {type(pkt).__name__} while waiting for PUBLISH")

    def disconnect(self) -> None:
        try:
            self.channel.send(Disconnect().encode())
        except ConnectionError:
            pass
        self.channel.close()
