"""ZMTP 3.0 subset: greeting, NULL-mechanism READY, frames, PUB/SUB filtering.

Subscriptions use the 3.0 convention: a message frame whose first byte is
0x01 (subscribe) or 0x00 (unsubscribe) followed by the topic prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

SIGNATURE_HEAD = 0xFF
SIGNATURE_TAIL = 0x7F
VERSION = (3, 0)
GREETING_SIZE = 64
MECHANISM = b"NULL"

FLAG_MORE = 0x01
FLAG_LONG = 0x02
FLAG_COMMAND = 0x04

MAX_FRAME_BODY = 256 * 1024 * 1024
SOCKET_TYPES = {"PUB", "SUB", "PAIR", "PUSH", "PULL"}
_COMPATIBLE = {"PUB": {"SUB"}, "SUB": {"PUB"}, "PAIR": {"PAIR"}, "PUSH": {"PULL"}, "PULL": {"PUSH"}}


class ZmtpError(ValueError):
    pass


class HandshakeError(ZmtpError):
    def __init__(self, message: str, offset: int | None = None, peer=None):
        where = "" if offset is None else f" at byte offset {offset}"
        who = "" if peer is None else f" (peer {peer})"
        super().__init__(f"ZMTP handshake failed{where}{who}: {message}")
        self.reason = message
        self.offset = offset
        self.peer = peer


def build_greeting(as_server: bool = False, mechanism: bytes = MECHANISM) -> bytes:
    if len(mechanism) > 20:
        raise ZmtpError("mechanism name longer than 20 bytes")
    return (bytes([SIGNATURE_HEAD]) + bytes(8) + bytes([SIGNATURE_TAIL])
            + bytes(VERSION) + mechanism.ljust(20, b"\x00")
            + bytes([1 if as_server else 0]) + bytes(31))


@dataclass(frozen=True)
class Greeting:
    version: tuple[int, int]
    mechanism: bytes
    as_server: bool


def parse_greeting(data) -> Greeting:
    data = bytes(data)
    if len(data) != GREETING_SIZE:
        raise HandshakeError(f"greeting is {len(data)} bytes, expected 64", len(data))
    if data[0] != SIGNATURE_HEAD:
        raise HandshakeError(f"bad signature byte 0x{data[0]:02x}", 0)
    if data[9] != SIGNATURE_TAIL:
        raise HandshakeError(f"bad signature byte 0x{data[9]:02x}", 9)
    if data[10] < 3:
        raise HandshakeError(f"unsupported major version {data[10]}", 10)
    mech = data[12:32].rstrip(b"\x00")
    if mech != MECHANISM:
        raise HandshakeError(f"unsupported mechanism {mech!r}", 12)
    if data[32] not in (0, 1):
        raise HandshakeError(f"as-server flag must be 0 or 1, got {data[32]}", 32)
    return Greeting((data[10], data[11]), mech, bool(data[32]))


@dataclass(frozen=True)
class Frame:
    body: bytes
    more: bool = False
    command: bool = False

    @property
    def flags(self) -> int:
        f = FLAG_MORE if self.more else 0
        if len(self.body) > 255:
            f |= FLAG_LONG
        if self.command:
            f |= FLAG_COMMAND
        return f

    def encode(self) -> bytes:
        return zmtp_frame(self.flags, self.body)


def zmtp_frame(flags: int, body) -> bytes:
    """Serialise one frame; the LONG bit is derived from the body size."""
    body = bytes(body)
    if flags & ~(FLAG_MORE | FLAG_LONG | FLAG_COMMAND):
        raise ZmtpError(f"reserved flag bits set in 0x{flags:02x}")
    if len(body) > 255:
        return struct.pack(">BQ", (flags | FLAG_LONG), len(body)) + body
    return struct.pack(">BB", flags & ~FLAG_LONG, len(body)) + body


def frame_wire_size(body_len: int) -> int:
    return (9 if body_len > 255 else 2) + body_len


class FrameParser:
    def __init__(self, max_body: int = MAX_FRAME_BODY):
        self.max_body = max_body
        self._buf = bytearray()

    def feed(self, data) -> list[Frame]:
        self._buf += data
        buf = self._buf
        out, pos = [], 0
        while len(buf) - pos >= 2:
            flags = buf[pos]
            if flags & 0xF8:
                raise ZmtpError(f"reserved flag bits set in 0x{flags:02x}")
            if flags & FLAG_LONG:
                if len(buf) - pos < 9:
                    break
                size = struct.unpack_from(">Q", buf, pos + 1)[0]
                head = 9
            else:
                size = buf[pos + 1]
                head = 2
            if size > self.max_body:
                raise ZmtpError(f"frame body of {size} bytes exceeds maximum {self.max_body}")
            if len(buf) - pos < head + size:
                break
            body = bytes(buf[pos + head:pos + head + size])
            out.append(Frame(body, bool(flags & FLAG_MORE), bool(flags & FLAG_COMMAND)))
            pos += head + size
        if pos:
            del buf[:pos]
        return out


def zmtp_parse(data) -> list[Frame]:
    parser = FrameParser()
    frames = parser.feed(data)
    if parser._buf:
        raise ZmtpError(f"{len(parser._buf)} trailing bytes form an incomplete frame")
    return frames


# -- commands ---------------------------------------------------------------

def encode_command(name: str, data: bytes = b"") -> bytes:
    raw = name.encode("ascii")
    return zmtp_frame(FLAG_COMMAND, bytes([len(raw)]) + raw + data)


def decode_command(frame: Frame) -> tuple[str, bytes]:
    if not frame.command:
        raise ZmtpError("expected a command frame")
    body = frame.body
    if not body or len(body) < 1 + body[0]:
        raise ZmtpError("truncated command name")
    return body[1:1 + body[0]].decode("ascii", "replace"), body[1 + body[0]:]


def encode_metadata(props: dict[str, bytes]) -> bytes:
    out = bytearray()
    for name, value in props.items():
        raw = name.encode("ascii")
        out += bytes([len(raw)]) + raw + struct.pack(">I", len(value)) + value
    return bytes(out)


def decode_metadata(data: bytes) -> dict[str, bytes]:
    props, pos = {}, 0
    while pos < len(data):
        n = data[pos]
        if pos + 1 + n + 4 > len(data):
            raise ZmtpError("truncated metadata property")
        name = data[pos + 1:pos + 1 + n].decode("ascii", "replace")
        pos += 1 + n
        vlen = struct.unpack_from(">I", data, pos)[0]
        pos += 4
        if pos + vlen > len(data):
            raise ZmtpError(f"metadata value for {name!r} truncated")
        props[name] = data[pos:pos + vlen]
        pos += vlen
    return props


def ready_command(socket_type: str, identity: bytes = b"") -> bytes:
    props = {"Socket-Type": socket_type.encode()}
    if identity:
        props["Identity"] = identity
    return encode_command("READY", encode_metadata(props))


def subscription(prefix: bytes, subscribe: bool = True) -> bytes:
    return zmtp_frame(0, bytes([1 if subscribe else 0]) + bytes(prefix))


def parse_subscription(frame: Frame) -> tuple[bool, bytes]:
    if frame.command or frame.more or not frame.body or frame.body[0] not in (0, 1):
        raise ZmtpError("not a subscription message")
    return frame.body[0] == 1, frame.body[1:]


# -- sessions ---------------------------------------------------------------

class Session:
    """A handshaken ZMTP connection; reads whole multipart messages."""

    def __init__(self, channel, socket_type: str, peer_type: str, peer_identity: bytes,
                 parser: FrameParser, pending: list[Frame]):
        self.channel = channel
        self.socket_type = socket_type
        self.peer_type = peer_type
        self.peer_identity = peer_identity
        self._parser = parser
        self._pending = pending

    def send_message(self, parts) -> None:
        parts = list(parts)
        out = bytearray()
        for i, part in enumerate(parts):
            out += zmtp_frame(FLAG_MORE if i < len(parts) - 1 else 0, part)
        self.channel.send(bytes(out))

    def next_frame(self, timeout=None) -> Frame:
        while not self._pending:
            data = self.channel.recv(timeout)
            if not data:
                raise ConnectionError("ZMTP peer closed the connection")
            self._pending.extend(self._parser.feed(data))
        return self._pending.pop(0)

    def recv_message(self, timeout=None) -> list[bytes]:
        parts = []
        while True:
            frame = self.next_frame(timeout)
            if frame.command:
                continue
            parts.append(frame.body)
            if not frame.more:
                return parts

    def subscribe(self, prefix: bytes) -> None:
        self.channel.send(subscription(prefix))

    def close(self) -> None:
        self.channel.close()


def zmtp_handshake(channel, role: str, identity: bytes = b"", peer=None,
                   timeout: float | None = 10.0) -> Session:
    """Exchange greetings and READY commands; return the established session."""
    role = role.upper()
    if role not in SOCKET_TYPES:
        raise ZmtpError(f"unknown socket type {role!r}; valid: {', '.join(sorted(SOCKET_TYPES))}")
    channel.send(build_greeting())
    try:
        raw = channel.recv_exact(GREETING_SIZE, timeout)
    except ConnectionError as exc:
        raise HandshakeError(f"connection closed during greeting: {exc}", peer=peer) from None
    try:
        parse_greeting(raw)
    except HandshakeError as exc:
        raise HandshakeError(exc.reason, exc.offset, peer) from None

    channel.send(ready_command(role, identity))
    parser = FrameParser()
    pending: list[Frame] = []
    while not pending:
        data = channel.recv(timeout)
        if not data:
            raise HandshakeError("connection closed before READY", peer=peer)
        try:
            pending.extend(parser.feed(data))
        except ZmtpError as exc:
            raise HandshakeError(str(exc), peer=peer) from None
    try:
        name, meta = decode_command(pending.pop(0))
        props = decode_metadata(meta)
    except ZmtpError as exc:
        raise HandshakeError(str(exc), GREETING_SIZE, peer) from None
    if name != "READY":
        raise HandshakeError(f"expected READY command, got {name!r}", GREETING_SIZE, peer)
    peer_type = props.get("Socket-Type", b"").decode("ascii", "replace")
    if peer_type not in _COMPATIBLE[role]:
        raise HandshakeError(f"{role} socket cannot talk to peer type {peer_type!r}", peer=peer)
    return Session(channel, role, peer_type, props.get("Identity", b""), parser, pending)
