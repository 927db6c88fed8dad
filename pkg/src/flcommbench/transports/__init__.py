"""Five interchangeable FL transports behind one endpoint contract."""

from __future__ import annotations

from ..codec import DEFAULT_CHUNK_SIZE
from ..netem import Clock, Link
from .amqp import AmqpDevice, AmqpServer
from .base import (DEFAULT_TIMEOUT, Accounting, DeviceEndpoint, HandshakeFailure, IncompleteRound,
                   Ports, ServerEndpoint, TransportError, TransportKind)
from .mqtt import MqttDevice, MqttServer
from .tcp import TcpDevice, TcpServer
from .udp import UdpDevice, UdpServer
from .zmtp import ZmtpDevice, ZmtpServer

_SERVERS = {
    TransportKind.TCP: TcpServer,
    TransportKind.UDP: UdpServer,
    TransportKind.MQTT: MqttServer,
    TransportKind.AMQP: AmqpServer,
    TransportKind.ZMTP: ZmtpServer,
}
_DEVICES = {
    TransportKind.TCP: TcpDevice,
    TransportKind.UDP: UdpDevice,
    TransportKind.MQTT: MqttDevice,
    TransportKind.AMQP: AmqpDevice,
    TransportKind.ZMTP: ZmtpDevice,
}


def open_server(kind, network, host: str, ports: Ports, accounting: Accounting, device_ids,
                chunk_size: int = DEFAULT_CHUNK_SIZE) -> ServerEndpoint:
    kind = TransportKind.parse(kind)
    kw = {"chunk_size": chunk_size} if kind is TransportKind.UDP else {}
    return _SERVERS[kind](network, host, ports, accounting, device_ids, **kw)


def open_device(kind, device_id: int, network, server_host: str, ports: Ports, profile=None,
                chunk_size: int = DEFAULT_CHUNK_SIZE) -> DeviceEndpoint:
    kind = TransportKind.parse(kind)
    if kind is TransportKind.UDP:
        return UdpDevice(device_id, network, server_host, ports, profile, chunk_size)
    return _DEVICES[kind](device_id, network, server_host, ports)


def connect_all(kind, links: dict[int, Link], network=None, host: str = "mem",
                ports: Ports | None = None, clock: Clock | None = None, record=None,
                timeout: float = DEFAULT_TIMEOUT, chunk_size: int = DEFAULT_CHUNK_SIZE):
    """Bring up a server endpoint and one device endpoint per link.

    ``links`` maps device id to its :class:`~flcommbench.netem.Link`.
    Returns ``(server, devices)`` once every channel is established.
    """
    from ..channels import MemoryNetwork

    network = network or MemoryNetwork(host)
    ports = ports or Ports()
    accounting = Accounting(clock or Clock("virtual"), dict(links), record)
    server = open_server(kind, network, host, ports, accounting, sorted(links), chunk_size)
    devices = []
    try:
        for dev in sorted(links):
            devices.append(open_device(kind, dev, network, host, ports, links[dev].profile,
                                       chunk_size))
        server.wait_ready(timeout)
    except Exception:
        for d in devices:
            d.close()
        server.close()
        raise
    return server, devices


__all__ = [
    "Accounting", "DeviceEndpoint", "HandshakeFailure", "IncompleteRound", "Ports",
    "ServerEndpoint", "TransportError", "TransportKind", "connect_all", "open_device",
    "open_server",
]
