"""Embedded message infrastructure: MQTT subset, fan-out broker, ZMTP framing."""

from . import fanout, mqtt, zmtp
from .server import BrokerServer, start_fanout_broker, start_mqtt_broker

__all__ = ["fanout", "mqtt", "zmtp", "BrokerServer", "start_fanout_broker", "start_mqtt_broker"]
