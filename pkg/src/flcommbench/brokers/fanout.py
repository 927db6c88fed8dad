"""Fan-out exchange broker with its own compact framing.

Not AMQP 0-9-1 compatible. A frame is ``[type:1][length:4 BE][body]``; names
inside bodies are ``[len:1][utf-8]``. Exchange ``""`` is the default exchange,
which routes a message to the queue named by its routing key.
"""

from __future__ import annotations

import collections
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_FRAME_BODY = 256 * 1024 * 1024
DEFAULT_EXCHANGE = ""


class FanoutError(ValueError):
    pass


class FrameType(IntEnum):
    DECLARE_EXCHANGE = 0x01
    DECLARE_QUEUE = 0x02
    BIND = 0x03
    PUBLISH = 0x04
    DELIVER = 0x05
    CONSUME = 0x06
    OK = 0x07
    ERROR = 0x08


@dataclass(frozen=True)
class Frame:
    type: FrameType
    body: bytes = b""

    def encode(self) -> bytes:
        return struct.pack(">BI", self.type, len(self.body)) + self.body


def name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise FanoutError(f"name {name!r} longer than 255 bytes")
    return bytes([len(raw)]) + raw


def read_name(body, pos: int = 0) -> tuple[str, int]:
    if pos >= len(body):
        raise FanoutError("truncated name")
    n = body[pos]
    if pos + 1 + n > len(body):
        raise FanoutError("truncated name")
    try:
        return bytes(body[pos + 1:pos + 1 + n]).decode("utf-8"), pos + 1 + n
    except UnicodeDecodeError as exc:
        raise FanoutError(f"invalid UTF-8 name: {exc}") from None


def declare_exchange(name: str, kind: str = "fanout") -> Frame:
    return Frame(FrameType.DECLARE_EXCHANGE, name_bytes(name) + name_bytes(kind))


def declare_queue(name: str) -> Frame:
    return Frame(FrameType.DECLARE_QUEUE, name_bytes(name))


def bind(exchange: str, queue: str) -> Frame:
    return Frame(FrameType.BIND, name_bytes(exchange) + name_bytes(queue))


def publish(exchange: str, message: bytes, routing_key: str = "") -> Frame:
    return Frame(FrameType.PUBLISH, name_bytes(exchange) + name_bytes(routing_key) + bytes(message))


def deliver(queue: str, message: bytes) -> Frame:
    return Frame(FrameType.DELIVER, name_bytes(queue) + bytes(message))


def consume(queue: str) -> Frame:
    return Frame(FrameType.CONSUME, name_bytes(queue))


def ok(request: FrameType, name: str = "") -> Frame:
    return Frame(FrameType.OK, bytes([request]) + name_bytes(name))


def error(message: str) -> Frame:
    return Frame(FrameType.ERROR, message.encode("utf-8"))


def deliver_wire_size(queue: str, message_len: int) -> int:
    return 5 + 1 + len(queue.encode()) + message_len


def publish_wire_size(exchange: str, routing_key: str, message_len: int) -> int:
    return 5 + 2 + len(exchange.encode()) + len(routing_key.encode()) + message_len


class FrameParser:
    def __init__(self, max_body: int = MAX_FRAME_BODY):
        self.max_body = max_body
        self._buf = bytearray()

    def feed(self, data) -> list[Frame]:
        self._buf += data
        buf = self._buf
        out, pos = [], 0
        while len(buf) - pos >= 5:
            ftype, n = struct.unpack_from(">BI", buf, pos)
            if ftype not in FrameType._value2member_map_:
                raise FanoutError(f"unknown frame type 0x{ftype:02x}")
            if n > self.max_body:
                raise FanoutError(f"frame body of {n} bytes exceeds maximum {self.max_body}")
            if len(buf) - pos < 5 + n:
                break
            out.append(Frame(FrameType(ftype), bytes(buf[pos + 5:pos + 5 + n])))
            pos += 5 + n
        if pos:
            del buf[:pos]
        return out


@dataclass
class FanoutBrokerState:
    exchanges: dict[str, str] = field(default_factory=dict)
    queues: dict[str, collections.deque] = field(default_factory=dict)
    bindings: set[tuple[str, str]] = field(default_factory=set)
    consumers: dict[str, object] = field(default_factory=dict)

    def bound_queues(self, exchange: str) -> list[str]:
        return sorted(q for e, q in self.bindings if e == exchange)

    def drop(self, conn) -> None:
        for q in [q for q, c in self.consumers.items() if c == conn]:
            del self.consumers[q]


def _drain(state: FanoutBrokerState, queue: str) -> list[tuple[object, Frame]]:
    conn = state.consumers.get(queue)
    if conn is None:
        return []
    q = state.queues[queue]
    out = []
    while q:
        out.append((conn, deliver(queue, q.popleft())))
    return out


def fanout_broker_step(state: FanoutBrokerState, conn, frame: Frame) -> list[tuple[object, Frame]]:
    """Apply one client frame; return ``(connection, frame)`` pairs to send.

    Errors are reported to the sender as ERROR frames; state is unchanged.
    """
    try:
        return _step(state, conn, frame)
    except FanoutError as exc:
        return [(conn, error(str(exc)))]


def _step(state, conn, frame):
    t, body = frame.type, frame.body
    if t == FrameType.DECLARE_EXCHANGE:
        name, pos = read_name(body)
        kind, _ = read_name(body, pos)
        if kind != "fanout":
            raise FanoutError(f"unsupported exchange kind {kind!r}; only 'fanout'")
        if name == DEFAULT_EXCHANGE:
            raise FanoutError("the default exchange cannot be declared")
        if state.exchanges.setdefault(name, kind) != kind:
            raise FanoutError(f"exchange {name!r} already declared as {state.exchanges[name]!r}")
        return [(conn, ok(t, name))]
    if t == FrameType.DECLARE_QUEUE:
        name, _ = read_name(body)
        state.queues.setdefault(name, collections.deque())
        return [(conn, ok(t, name))]
    if t == FrameType.BIND:
        exchange, pos = read_name(body)
        queue, _ = read_name(body, pos)
        if exchange not in state.exchanges:
            raise FanoutError(f"BIND to unknown exchange {exchange!r}")
        if queue not in state.queues:
            raise FanoutError(f"BIND of unknown queue {queue!r}")
        state.bindings.add((exchange, queue))
        return [(conn, ok(t, queue))]
    if t == FrameType.CONSUME:
        queue, _ = read_name(body)
        if queue not in state.queues:
            raise FanoutError(f"CONSUME from unknown queue {queue!r}")
        holder = state.consumers.get(queue)
        if holder is not None and holder != conn:
            raise FanoutError(f"queue {queue!r} already has a consumer")
        state.consumers[queue] = conn
        return [(conn, ok(t, queue))] + _drain(state, queue)
    if t == FrameType.PUBLISH:
        exchange, pos = read_name(body)
        key, pos = read_name(body, pos)
        message = body[pos:]
        if exchange == DEFAULT_EXCHANGE:
            targets = [key] if key in state.queues else []
        elif exchange in state.exchanges:
            targets = state.bound_queues(exchange)
        else:
            raise FanoutError(f"PUBLISH to undeclared exchange {exchange!r}")
        out = []
        for q in targets:
            state.queues[q].append(message)
            out.extend(_drain(state, q))
        return out
    raise FanoutError(f"clients may not send {t.name} frames")


class FanoutClient:
    """Blocking client: declares, binds, consumes and publishes."""

    def __init__(self, channel):
        self.channel = channel
        self._parser = FrameParser()
        self._pending: list[Frame] = []
        self._deliveries: list[Frame] = []

    def _next(self, timeout):
        while not self._pending:
            data = self.channel.recv(timeout)
            if not data:
                raise ConnectionError("fan-out broker closed the connection")
            self._pending.extend(self._parser.feed(data))
        return self._pending.pop(0)

    def _request(self, frame: Frame, timeout: float = 10.0) -> Frame:
        self.channel.send(frame.encode())
        while True:
            reply = self._next(timeout)
            if reply.type == FrameType.DELIVER:
                self._deliveries.append(reply)
                continue
            if reply.type == FrameType.ERROR:
                raise FanoutError(reply.body.decode("utf-8", "replace"))
            if reply.type == FrameType.OK and reply.body[:1] == bytes([frame.type]):
                return reply
            raise FanoutError(f"unexpected {reply.type.name} reply to {frame.type.name}")

    def declare_exchange(self, name, kind="fanout"):
        return self._request(declare_exchange(name, kind))

    def declare_queue(self, name):
        return self._request(declare_queue(name))

    def bind(self, exchange, queue):
        return self._request(bind(exchange, queue))

    def consume(self, queue):
        return self._request(consume(queue))

    def publish(self, exchange, message, routing_key=""):
        self.channel.send(publish(exchange, message, routing_key).encode())

    def next_delivery(self, timeout=None) -> tuple[str, bytes]:
        if self._deliveries:
            frame = self._deliveries.pop(0)
        else:
            while True:
                frame = self._next(timeout)
                if frame.type == FrameType.DELIVER:
                    break
                if frame.type == FrameType.ERROR:
                    raise FanoutError(frame.body.decode("utf-8", "replace"))
        queue, pos = read_name(frame.body)
        return queue, frame.body[pos:]

    def close(self):
        self.channel.close()
