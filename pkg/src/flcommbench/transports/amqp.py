"""Fan-out broker transport.

The server publishes globals to the fan-out exchange ``fl.global``; every
device consumes its own bound queue ``fl.global.<id>``. Updates go through
the default exchange to the queue ``fl.updates``. Message bodies are framed
:class:`~flcommbench.codec.WireMessage` values.
"""

from __future__ import annotations

import logging
import time

from .. import codec
from ..brokers import fanout as f
from ..brokers.server import start_fanout_broker
from ..codec import MessageKind, WireMessage
from .base import (DEFAULT_TIMEOUT, Delivery, DeviceEndpoint, Inbound, ServerEndpoint,
                   TransportError, TransportKind, spawn)

log = logging.getLogger(__name__)

EXCHANGE = "fl.global"
UPDATES = "fl.updates"


def device_queue(device_id: int) -> str:
    return f"fl.global.{device_id}"


class AmqpServer(ServerEndpoint):
    kind = TransportKind.AMQP
    concurrent_broadcast = True

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.broker = start_fanout_broker(self.network.listen((self.host, self.ports.amqp)))
        self.client = f.FanoutClient(self.network.connect((self.host, self.ports.amqp)))
        self.client.declare_exchange(EXCHANGE)
        self.client.declare_queue(UPDATES)
        self.client.consume(UPDATES)
        spawn(self._read_updates, name="amqp-server")

    def _read_updates(self):
        while True:
            try:
                _, body = self.client.next_delivery(None)
                msg = codec.parse_stream_message(body)
            except codec.CodecError as exc:
                log.warning("malformed update message: %s", exc)
                continue
            except (ConnectionError, OSError, ValueError) as exc:
                if not self._closed:
                    log.error("server lost its broker connection: %s", exc)
                    for dev in self.device_ids:
                        self._device_lost(dev, "unreachable: broker connection lost")
                return
            if msg.kind == MessageKind.CLIENT_UPDATE:
                self.inbox.put(Inbound(msg.sender_id, msg.round, msg.payload,
                                       Delivery(f.publish_wire_size("", UPDATES, len(body)))))

    def bound_devices(self) -> set[int]:
        def probe(state):
            return {d for d in self.device_ids
                    if (EXCHANGE, device_queue(d)) in state.bindings
                    and device_queue(d) in state.consumers}
        return self.broker.call(probe) or set()

    def wait_ready(self, timeout=DEFAULT_TIMEOUT):
        deadline = time.monotonic() + timeout
        while not self.bound_devices() >= set(self.device_ids):
            if time.monotonic() > deadline:
                missing = set(self.device_ids) - self.bound_devices()
                raise TransportError(f"queues not bound within {timeout}s", "setup", None, missing)
            time.sleep(0.005)

    def _send_global(self, rnd, payload):
        body = codec.frame_stream_message(
            WireMessage(MessageKind.GLOBAL_MODEL, rnd, codec.SERVER_ID, payload))
        self.client.publish(EXCHANGE, body)
        return {d: Delivery(f.deliver_wire_size(device_queue(d), len(body))) for d in self.device_ids}

    def close(self):
        super().close()
        self.client.close()
        self.broker.stop()


class AmqpDevice(DeviceEndpoint):
    kind = TransportKind.AMQP

    def __init__(self, device_id, network, server_host, ports):
        super().__init__(device_id)
        try:
            channel = network.connect((server_host, ports.amqp))
        except TimeoutError as exc:
            raise TransportError(f"broker unreachable: {exc}", "setup", None, [device_id]) from None
        self.client = f.FanoutClient(channel)
        q = device_queue(device_id)
        self.client.declare_exchange(EXCHANGE)
        self.client.declare_queue(q)
        self.client.bind(EXCHANGE, q)
        self.client.consume(q)

    def receive_global(self, rnd, timeout=DEFAULT_TIMEOUT):
        deadline = time.monotonic() + timeout
        while True:
            _, body = self.client.next_delivery(max(0.01, deadline - time.monotonic()))
            msg = codec.parse_stream_message(body)
            if msg.kind == MessageKind.GLOBAL_MODEL and msg.round == rnd:
                return msg.payload

    def send_update(self, rnd, payload):
        body = codec.frame_stream_message(
            WireMessage(MessageKind.CLIENT_UPDATE, rnd, self.device_id, payload))
        self.client.publish("", body, routing_key=UPDATES)

    def close(self):
        self.client.close()
