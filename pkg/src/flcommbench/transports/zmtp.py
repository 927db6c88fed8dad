"""Brokerless pub/sub over ZMTP 3.0.

The server is a PUB socket; devices connect SUB sockets and subscribe to the
prefix ``fl``. PUB/SUB is one-way, so updates return over a separate framed
stream connection.
"""

from __future__ import annotations

import logging
import threading

from .. import codec
from ..brokers import zmtp as z
from ..codec import MessageKind, WireMessage
from .base import (DEFAULT_TIMEOUT, Delivery, DeviceEndpoint, HandshakeFailure, Inbound,
                   RoundInbox, ServerEndpoint, TransportKind, accept_loop, read_hello,
                   read_messages, spawn)

log = logging.getLogger(__name__)

TOPIC = b"fl.global"
PREFIX = b"fl"


class _Subscriber:
    def __init__(self, session: z.Session, device_id: int | None):
        self.session = session
        self.device_id = device_id
        self.prefixes: set[bytes] = set()

    def matches(self, topic: bytes) -> bool:
        return any(topic.startswith(p) for p in self.prefixes)


class ZmtpServer(ServerEndpoint):
    kind = TransportKind.ZMTP
    concurrent_broadcast = True

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.subscribers: list[_Subscriber] = []
        self.handshake_errors: list[str] = []
        self.update_channels: dict[int, object] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.pub_listener = self.network.listen((self.host, self.ports.zmtp_pub))
        self.upd_listener = self.network.listen((self.host, self.ports.zmtp_updates))
        accept_loop(self.pub_listener, self._on_sub, self._stop, "zmtp-pub")
        accept_loop(self.upd_listener, self._on_update_conn, self._stop, "zmtp-upd")

    def _check_ready(self, dev):
        with self._lock:
            subscribed = any(s.device_id == dev and s.matches(TOPIC) for s in self.subscribers)
            if subscribed and dev in self.update_channels:
                self._mark_connected(dev)

    def _on_sub(self, ch):
        try:
            session = z.zmtp_handshake(ch, "PUB")
        except (z.ZmtpError, ConnectionError, TimeoutError) as exc:
            self.handshake_errors.append(str(exc))
            with self._ready:
                self._ready.notify_all()
            ch.close()
            return
        try:
            dev = int(session.peer_identity.decode() or "-1")
        except ValueError:
            dev = None
        sub = _Subscriber(session, dev)
        with self._lock:
            self.subscribers.append(sub)
        while True:
            try:
                frame = session.next_frame(None)
            except (ConnectionError, OSError, z.ZmtpError):
                break
            try:
                on, prefix = z.parse_subscription(frame)
            except z.ZmtpError:
                continue
            with self._lock:
                (sub.prefixes.add if on else sub.prefixes.discard)(prefix)
            if dev is not None:
                self._check_ready(dev)
        with self._lock:
            self.subscribers.remove(sub)

    def _on_update_conn(self, ch):
        try:
            hello, parser, early = read_hello(ch)
        except (ConnectionError, TimeoutError, codec.CodecError):
            ch.close()
            return
        dev = hello.sender_id
        with self._lock:
            if dev not in self.device_ids or dev in self.update_channels:
                ch.close()
                return
            self.update_channels[dev] = ch
        self._check_ready(dev)
        read_messages(ch, lambda m: self._on_message(dev, m), lambda: self._device_lost(dev),
                      parser, early)

    def _on_message(self, dev, msg):
        if msg.kind == MessageKind.CLIENT_UPDATE:
            self.inbox.put(Inbound(dev, msg.round, msg.payload,
                                   Delivery(codec.framed_size(len(msg.payload)))))

    def wait_ready(self, timeout=DEFAULT_TIMEOUT):
        with self._ready:
            self._ready.wait_for(lambda: self.handshake_errors
                                 or self._connected >= set(self.device_ids), timeout)
        if self.handshake_errors:
            raise HandshakeFailure("; ".join(self.handshake_errors), "setup")
        super().wait_ready(0)

    def publish(self, topic: bytes, body: bytes) -> list[int | None]:
        """Send one message to every matching subscriber; return their ids."""
        with self._lock:
            targets = [s for s in self.subscribers if s.matches(topic)]
        for s in targets:
            s.session.send_message([topic, body])
        return [s.device_id for s in targets]

    def _send_global(self, rnd, payload):
        body = codec.frame_stream_message(
            WireMessage(MessageKind.GLOBAL_MODEL, rnd, codec.SERVER_ID, payload))
        size = z.frame_wire_size(len(TOPIC)) + z.frame_wire_size(len(body))
        return {d: Delivery(size) for d in self.publish(TOPIC, body) if d is not None}

    def close(self):
        super().close()
        self._stop.set()
        self.pub_listener.close()
        self.upd_listener.close()
        for s in list(self.subscribers):
            s.session.close()
        for ch in self.update_channels.values():
            ch.close()


class ZmtpDevice(DeviceEndpoint):
    kind = TransportKind.ZMTP

    def __init__(self, device_id, network, server_host, ports, prefix: bytes = PREFIX):
        super().__init__(device_id)
        ch = network.connect((server_host, ports.zmtp_pub))
        try:
            self.sub = z.zmtp_handshake(ch, "SUB", identity=str(device_id).encode(),
                                        peer=f"server for device {device_id}")
        except z.ZmtpError as exc:
            ch.close()
            raise HandshakeFailure(str(exc), "setup", None, [device_id]) from None
        self.sub.subscribe(prefix)
        self._inbox = RoundInbox()
        spawn(self._read_sub, name=f"zmtp-sub{device_id}")
        self.updates = network.connect((server_host, ports.zmtp_updates))
        self.updates.send(codec.frame_stream_message(WireMessage(MessageKind.HELLO, 0, device_id)))

    def _read_sub(self):
        while True:
            try:
                parts = self.sub.recv_message(None)
            except (ConnectionError, OSError, z.ZmtpError):
                self._inbox.close()
                return
            if len(parts) != 2:
                continue
            try:
                msg = codec.parse_stream_message(parts[1])
            except codec.CodecError:
                continue
            if msg.kind == MessageKind.GLOBAL_MODEL:
                self._inbox.put(msg.round, msg.payload)

    def receive_global(self, rnd, timeout=DEFAULT_TIMEOUT):
        return self._inbox.get(rnd, timeout)

    def send_update(self, rnd, payload):
        self.updates.send(codec.frame_stream_message(
            WireMessage(MessageKind.CLIENT_UPDATE, rnd, self.device_id, payload)))

    def close(self):
        self.sub.close()
        self.updates.close()
