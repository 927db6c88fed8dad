"""MQTT transport over the embedded broker (QoS 0, clean sessions).

Globals go to ``fl/global/<round>``; updates to ``fl/update/<device>/<round>``.
"""

from __future__ import annotations

import logging
import time

from ..brokers import mqtt as m
from ..brokers.server import start_mqtt_broker
from .base import (DEFAULT_TIMEOUT, Delivery, DeviceEndpoint, Inbound, ServerEndpoint,
                   TransportError, TransportKind, spawn)

log = logging.getLogger(__name__)

GLOBAL_FILTER = "fl/global/#"
UPDATE_FILTER = "fl/update/#"


def global_topic(rnd: int) -> str:
    return f"fl/global/{rnd}"


def update_topic(device_id: int, rnd: int) -> str:
    return f"fl/update/{device_id}/{rnd}"


def publish_size(topic: str, payload_len: int) -> int:
    n = 2 + len(topic.encode()) + payload_len
    return 1 + len(m.encode_remaining_length(n)) + n


class MqttServer(ServerEndpoint):
    kind = TransportKind.MQTT
    concurrent_broadcast = True

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.broker = start_mqtt_broker(self.network.listen((self.host, self.ports.mqtt)))
        self.client = m.MqttClient(self.network.connect((self.host, self.ports.mqtt)), "server")
        self.client.connect()
        self.client.subscribe(UPDATE_FILTER)
        spawn(self._read_updates, name="mqtt-server")

    def _read_updates(self):
        while True:
            try:
                pkt = self.client.next_publish(None)
            except (ConnectionError, OSError, ValueError) as exc:
                if not self._closed:
                    log.error("server lost its broker connection: %s", exc)
                    for dev in self.device_ids:
                        self._device_lost(dev, "unreachable: broker connection lost")
                return
            try:
                _, _, dev, rnd = pkt.topic.split("/")
                dev, rnd = int(dev), int(rnd)
            except ValueError:
                log.warning("ignoring publish on unexpected topic %r", pkt.topic)
                continue
            self.inbox.put(Inbound(dev, rnd, pkt.payload,
                                   Delivery(publish_size(pkt.topic, len(pkt.payload)))))

    def subscribed_devices(self) -> set[int]:
        def probe(state):
            out = set()
            for conn, filters in state.subscriptions.items():
                cid = state.sessions.get(conn, "")
                if cid.startswith("device-") and any(m.topic_matches(f, "fl/global/1") for f in filters):
                    out.add(int(cid[7:]))
            return out
        return self.broker.call(probe) or set()

    def session_count(self) -> int:
        return self.broker.call(lambda s: len(s.sessions))

    def wait_ready(self, timeout=DEFAULT_TIMEOUT):
        deadline = time.monotonic() + timeout
        while not self.subscribed_devices() >= set(self.device_ids):
            if time.monotonic() > deadline:
                missing = set(self.device_ids) - self.subscribed_devices()
                raise TransportError(f"subscription timeout after {timeout}s", "setup", None, missing)
            time.sleep(0.005)

    def _send_global(self, rnd, payload):
        topic = global_topic(rnd)
        self.client.publish(topic, payload)
        size = publish_size(topic, len(payload))
        return {dev: Delivery(size) for dev in self.device_ids}

    def close(self):
        super().close()
        self.client.disconnect()
        self.broker.stop()


class MqttDevice(DeviceEndpoint):
    kind = TransportKind.MQTT

    def __init__(self, device_id, network, server_host, ports):
        super().__init__(device_id)
        try:
            channel = network.connect((server_host, ports.mqtt))
        except TimeoutError as exc:
            raise TransportError(f"broker unreachable: {exc}", "setup", None, [device_id]) from None
        self.client = m.MqttClient(channel, f"device-{device_id}")
        self.client.connect()
        try:
            self.client.subscribe(GLOBAL_FILTER)
        except TimeoutError:
            raise TransportError("subscription timeout", "setup", None, [device_id]) from None

    def receive_global(self, rnd, timeout=DEFAULT_TIMEOUT):
        want = global_topic(rnd)
        deadline = time.monotonic() + timeout
        while True:
            pkt = self.client.next_publish(max(0.01, deadline - time.monotonic()))
            if pkt.topic == want:
                return pkt.payload
            log.debug("device %d skipping %s while waiting for %s", self.device_id, pkt.topic, want)

    def send_update(self, rnd, payload):
        self.client.publish(update_topic(self.device_id, rnd), payload)

    def close(self):
        self.client.disconnect()
