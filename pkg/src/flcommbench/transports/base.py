"""Endpoint contract shared by all transports, plus server-side link accounting.

Payload bytes move over real channels (in-memory pipes or sockets) without
delay. Time is charged separately: the server endpoint knows every device's
:class:`~flcommbench.netem.Link` and computes each transfer's start/end on
the shared clock. Device endpoints never touch the clock, which is what keeps
in-process and distributed runs numerically identical.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass, field

from .. import codec
from ..metrics import CommEvent
from ..netem import Clock, Link

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class TransportKind(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    MQTT = "mqtt"
    AMQP = "amqp"
    ZMTP = "zmtp"

    @classmethod
    def parse(cls, value) -> "TransportKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ",".join(k.value for k in cls)
            raise ValueError(f"unknown protocol {value!r}; valid protocols: {{{valid}}}") from None

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Ports:
    tcp: int = 9000
    udp_data: int = 9000
    udp_control: int = 9001
    mqtt: int = 1883
    amqp: int = 5672
    zmtp_pub: int = 9010
    zmtp_updates: int = 9011
    session: int = 9100

    def shifted(self, offset: int) -> "Ports":
        return Ports(**{k: v + offset for k, v in self.__dict__.items()})


class TransportError(RuntimeError):
    def __init__(self, message: str, phase: str = "", round: int | None = None, devices=()):
        parts = [p for p in (phase and f"phase={phase}",
                             round is not None and f"round={round}",
                             devices and f"devices={sorted(devices)}") if p]
        super().__init__(f"{message} ({', '.join(parts)})" if parts else message)
        self.phase = phase
        self.round = round
        self.devices = sorted(devices)


class IncompleteRound(TransportError):
    """Not every expected device delivered its update."""


class HandshakeFailure(TransportError):
    pass


@dataclass
class Delivery:
    """What one device-directed send put on the wire."""

    data_bytes: int
    control_bytes: int = 0
    missing: int = 0
    datagram: bool = False


@dataclass
class Inbound:
    device_id: int
    round: int
    payload: bytes
    delivery: Delivery


@dataclass
class Accounting:
    clock: Clock
    links: dict[int, Link]
    record: object = None
    serialize_factor: float = 1.0
    events: list = field(default_factory=list)

    SERIALIZE_BPS = 1e9

    def _serialize_delay(self, n: int) -> float:
        # modelled extra marshalling cost under CPU stress; 1.0 disables it
        if self.serialize_factor <= 1.0 or not self.clock.virtual:
            return 0.0
        return (self.serialize_factor - 1.0) * n / self.SERIALIZE_BPS

    def transfer(self, dev: int, rnd: int, direction: str, d: Delivery, start: float) -> CommEvent:
        link = self.links[dev]
        t = start + self._serialize_delay(d.data_bytes)
        if d.datagram:
            data = link.datagrams(d.data_bytes, direction, t)
            ctl = link.control(d.control_bytes, direction, data.end)
            end, retx = ctl.end, 0
        else:
            tr = link.stream(d.data_bytes, direction, t, ("stream", direction, dev, rnd))
            end, retx = tr.end, tr.retransmissions
        ev = CommEvent(dev, rnd, direction, d.data_bytes + d.control_bytes, start, end, retx, d.missing)
        self.events.append(ev)
        if self.record is not None:
            self.record(ev)
        return ev

    def sequential(self, rnd: int, direction: str, deliveries: dict[int, Delivery]) -> float:
        t = self.clock.now()
        for dev in sorted(deliveries):
            t = self.transfer(dev, rnd, direction, deliveries[dev], t).end
        return self.clock.advance_to(t)

    def concurrent(self, rnd: int, direction: str, deliveries: dict[int, Delivery]) -> float:
        start = self.clock.now()
        timelines = []
        for dev in sorted(deliveries):
            tl = self.clock.branch()
            tl.now = self.transfer(dev, rnd, direction, deliveries[dev], start).end
            timelines.append(tl)
        return self.clock.join(*timelines) if timelines else start


class ServerEndpoint:
    """Server side of a transport. Subclasses implement the I/O hooks."""

    kind: TransportKind
    concurrent_broadcast = False

    def __init__(self, network, host: str, ports: Ports, accounting: Accounting,
                 device_ids, param_count: int | None = None):
        self.network = network
        self.host = host
        self.ports = ports
        self.accounting = accounting
        self.device_ids = sorted(device_ids)
        self.param_count = param_count
        self.inbox: queue.Queue = queue.Queue()
        self._ready = threading.Condition()
        self._connected: set[int] = set()
        self._closed = False

    # -- readiness ----------------------------------------------------------

    def _mark_connected(self, dev: int) -> None:
        with self._ready:
            self._connected.add(dev)
            self._ready.notify_all()

    def wait_ready(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        with self._ready:
            ok = self._ready.wait_for(lambda: self._connected >= set(self.device_ids), timeout)
            if not ok:
                missing = set(self.device_ids) - self._connected
                raise TransportError(f"{self.kind} endpoints not established within {timeout}s",
                                     "setup", None, missing)

    def _device_lost(self, dev: int, reason: str = "disconnected") -> None:
        if not self._closed:
            self.inbox.put(("lost", dev, reason))

    # -- contract -------------------------------------------------------------

    def broadcast_global(self, rnd: int, payload: bytes) -> float:
        deliveries = self._send_global(rnd, bytes(payload))
        if self.concurrent_broadcast:
            return self.accounting.concurrent(rnd, "down", deliveries)
        return self.accounting.sequential(rnd, "down", deliveries)

    def collect_updates(self, rnd: int, expected: int | None = None,
                        timeout: float = DEFAULT_TIMEOUT) -> list[tuple[int, bytes, int]]:
        """Block until ``expected`` devices delivered their round-``rnd`` update.

        Uploads are charged concurrently from the current clock instant.
        Returns ``(device_id, payload, missing_chunks)`` in device order.
        """
        expected = len(self.device_ids) if expected is None else expected
        got: dict[int, Inbound] = {}
        deadline = time.monotonic() + timeout
        while len(got) < expected:
            left = deadline - time.monotonic()
            try:
                item = self._next_inbound(rnd, max(left, 0.0))
            except queue.Empty:
                item = None
            if item is None:
                if time.monotonic() >= deadline:
                    missing = set(self.device_ids) - set(got)
                    raise IncompleteRound("update collection timed out", "upload", rnd, missing)
                continue
            if isinstance(item, tuple):
                _, dev, reason = item
                if dev not in got:
                    raise IncompleteRound(f"device {dev} {reason}", "upload", rnd, [dev])
                continue
            if item.round != rnd:
                log.warning("discarding round-%d update from device %d during round %d",
                            item.round, item.device_id, rnd)
                continue
            if item.device_id in got:
                log.warning("duplicate round-%d update from device %d ignored", rnd, item.device_id)
                continue
            if item.device_id not in self.device_ids:
                log.warning("update from unknown device %d ignored", item.device_id)
                continue
            got[item.device_id] = item
        self.accounting.concurrent(rnd, "up", {d: i.delivery for d, i in got.items()})
        return [(d, got[d].payload, got[d].delivery.missing) for d in sorted(got)]

    def _next_inbound(self, rnd: int, timeout: float):
        return self.inbox.get(timeout=min(timeout, 0.5))

    def _send_global(self, rnd: int, payload: bytes) -> dict[int, Delivery]:
        raise NotImplementedError

    def close(self) -> None:
        self._closed = True


class DeviceEndpoint:
    kind: TransportKind

    def __init__(self, device_id: int):
        self.device_id = device_id

    def receive_global(self, rnd: int, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        raise NotImplementedError

    def send_update(self, rnd: int, payload: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class RoundInbox:
    """Latest payload per round; ``get`` blocks until its round shows up."""

    def __init__(self):
        self._cond = threading.Condition()
        self._by_round: dict[int, bytes] = {}
        self._closed = False

    def put(self, rnd: int, payload: bytes) -> None:
        with self._cond:
            self._by_round[rnd] = payload
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self, rnd: int, timeout: float) -> bytes:
        with self._cond:
            ok = self._cond.wait_for(lambda: rnd in self._by_round or self._closed, timeout)
            if rnd in self._by_round:
                payload = self._by_round.pop(rnd)
                for stale in [r for r in self._by_round if r < rnd]:
                    del self._by_round[stale]
                return payload
            if not ok:
                raise TimeoutError(f"no global model for round {rnd} within {timeout}s")
            raise ConnectionError(f"server closed the connection before round {rnd}")


def read_messages(channel, on_message, on_close, parser=None, early=()):
    """Reader loop for framed stream messages; runs until EOF or error."""
    parser = parser or codec.StreamParser()
    try:
        for msg in early:
            on_message(msg)
        while True:
            try:
                data = channel.recv(None)
            except TimeoutError:
                continue
            if not data:
                break
            for msg in parser.feed(data):
                on_message(msg)
    except (ConnectionError, OSError, codec.CodecError) as exc:
        log.debug("reader stopped: %s", exc)
    finally:
        on_close()


def spawn(target, *args, name=None) -> threading.Thread:
    t = threading.Thread(target=target, args=args, daemon=True, name=name)
    t.start()
    return t


def accept_loop(listener, handler, stopped: threading.Event, name: str) -> threading.Thread:
    def run():
        while not stopped.is_set():
            try:
                ch = listener.accept(timeout=0.1)
            except TimeoutError:
                continue
            except OSError:
                break
            spawn(handler, ch, name=f"{name}-conn")
    return spawn(run, name=f"{name}-accept")


def read_hello(channel, timeout: float = DEFAULT_TIMEOUT):
    """Read the first framed message of a data channel, which must be HELLO.

    Returns ``(hello, parser, early)`` where ``early`` holds messages that
    arrived in the same reads.
    """
    parser = codec.StreamParser()
    deadline = time.monotonic() + timeout
    while True:
        data = channel.recv(max(0.01, deadline - time.monotonic()))
        if not data:
            raise ConnectionError("channel closed before HELLO")
        msgs = parser.feed(data)
        if msgs:
            if msgs[0].kind != codec.MessageKind.HELLO:
                raise codec.CodecError(f"expected HELLO, got {msgs[0].kind.name}")
            return msgs[0], parser, msgs[1:]
