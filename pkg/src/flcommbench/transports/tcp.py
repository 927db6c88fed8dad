"""Raw stream transport: one framed connection per device, sequential broadcast."""

from __future__ import annotations

import threading

from .. import codec
from ..codec import MessageKind, WireMessage
from .base import (DEFAULT_TIMEOUT, Delivery, DeviceEndpoint, Inbound, RoundInbox, ServerEndpoint,
                   TransportError, TransportKind, accept_loop, read_hello, read_messages, spawn)


class TcpServer(ServerEndpoint):
    kind = TransportKind.TCP

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.channels: dict[int, object] = {}
        self._stop = threading.Event()
        self.listener = self.network.listen((self.host, self.ports.tcp))
        accept_loop(self.listener, self._on_connect, self._stop, "tcp")

    def _on_connect(self, ch):
        try:
            hello, parser, early = read_hello(ch)
        except (ConnectionError, TimeoutError, codec.CodecError):
            ch.close()
            return
        dev = hello.sender_id
        if dev not in self.device_ids or dev in self.channels:
            ch.close()
            return
        self.channels[dev] = ch
        self._mark_connected(dev)
        read_messages(ch, lambda m: self._on_message(dev, m), lambda: self._device_lost(dev),
                      parser, early)

    def _on_message(self, dev, msg: WireMessage):
        if msg.kind == MessageKind.CLIENT_UPDATE:
            self.inbox.put(Inbound(dev, msg.round, msg.payload,
                                   Delivery(codec.framed_size(len(msg.payload)))))

    def _send_global(self, rnd, payload):
        frame = codec.frame_stream_message(
            WireMessage(MessageKind.GLOBAL_MODEL, rnd, codec.SERVER_ID, payload))
        out, failed = {}, []
        for dev in self.device_ids:
            try:
                self.channels[dev].send(frame)
                out[dev] = Delivery(len(frame))
            except (ConnectionError, OSError, KeyError):
                failed.append(dev)
        if failed:
            raise TransportError("broadcast send failed", "broadcast", rnd, failed)
        return out

    def close(self):
        super().close()
        self._stop.set()
        self.listener.close()
        for ch in self.channels.values():
            ch.close()


class StreamInbox(RoundInbox):
    """Device-side reader collecting GLOBAL_MODEL messages by round."""

    def __init__(self, channel, parser=None, early=()):
        super().__init__()
        spawn(read_messages, channel, self._on_message, self.close, parser, early,
              name="stream-inbox")

    def _on_message(self, msg):
        if msg.kind == MessageKind.GLOBAL_MODEL:
            self.put(msg.round, msg.payload)


class TcpDevice(DeviceEndpoint):
    kind = TransportKind.TCP

    def __init__(self, device_id, network, server_host, ports):
        super().__init__(device_id)
        self.channel = network.connect((server_host, ports.tcp))
        self.channel.send(codec.frame_stream_message(
            WireMessage(MessageKind.HELLO, 0, device_id)))
        self._inbox = StreamInbox(self.channel)

    def receive_global(self, rnd, timeout=DEFAULT_TIMEOUT):
        return self._inbox.get(rnd, timeout)

    def send_update(self, rnd, payload):
        self.channel.send(codec.frame_stream_message(
            WireMessage(MessageKind.CLIENT_UPDATE, rnd, self.device_id, payload)))

    def close(self):
        self.channel.close()
