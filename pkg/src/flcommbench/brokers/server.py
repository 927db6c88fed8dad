"""Threaded runtime that drives a broker state machine from live connections.

Connection reads happen concurrently (one reader thread per connection) but
every parsed packet goes through one event queue, so broker state is only
ever touched by the processing thread. Each connection also gets a writer
thread so a slow consumer cannot stall routing for the others.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading

from . import fanout, mqtt

log = logging.getLogger(__name__)

_CLOSED = object()
_ids = itertools.count()


class Connection:
    def __init__(self, channel, server: "BrokerServer"):
        self.channel = channel
        self.id = next(_ids)
        self._out: queue.Queue = queue.Queue()
        self._server = server
        self.closed = False
        self._writer = threading.Thread(target=self._write_loop, daemon=True,
                                        name=f"{server.name}-w{self.id}")
        self._writer.start()

    def __repr__(self):
        return f"<Connection {self.id}>"

    def send(self, data: bytes) -> None:
        if not self.closed:
            self._out.put(data)

    def _write_loop(self):
        while True:
            data = self._out.get()
            if data is None:
                break
            try:
                self.channel.send(data)
            except (ConnectionError, OSError):
                break

    def close(self):
        if not self.closed:
            self.closed = True
            self._out.put(None)
            self.channel.close()


class BrokerServer:
    """Accept loop plus serialized event processing for one broker protocol."""

    def __init__(self, listener, make_parser, step, state, name: str = "broker"):
        self.listener = listener
        self.make_parser = make_parser
        self.step = step
        self.state = state
        self.name = name
        self.connections: list[Connection] = []
        self.errors: list[str] = []
        self._events: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._accept_loop, daemon=True, name=f"{name}-accept"),
            threading.Thread(target=self._process_loop, daemon=True, name=f"{name}-process"),
        ]
        for t in self._threads:
            t.start()

    @property
    def address(self):
        return self.listener.address

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                channel = self.listener.accept(timeout=0.1)
            except TimeoutError:
                continue
            except OSError:
                break
            conn = Connection(channel, self)
            self.connections.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"{self.name}-r{conn.id}").start()

    def _read_loop(self, conn: Connection):
        parser = self.make_parser()
        while not self._stop.is_set():
            try:
                data = conn.channel.recv(0.2)
            except TimeoutError:
                continue
            except (ConnectionError, OSError):
                data = b""
            if not data:
                break
            try:
                for item in parser.feed(data):
                    self._events.put((conn, item))
            except ValueError as exc:
                self.errors.append(f"{conn}: malformed input: {exc}")
                break
        self._events.put((conn, _CLOSED))

    def _process_loop(self):
        while True:
            conn, item = self._events.get()
            if conn is None:
                break
            if item is _CLOSED:
                self.state.drop(conn)
                conn.close()
                continue
            if conn.closed:
                continue
            try:
                out = self.step(self.state, conn, item)
            except ValueError as exc:
                self.errors.append(f"{conn}: {exc}")
                conn.close()
                continue
            encoded: dict[int, bytes] = {}
            for target, packet in out:
                key = id(packet)
                if key not in encoded:
                    encoded[key] = packet.encode()
                target.send(encoded[key])

    def call(self, fn):
        """Run ``fn(state)`` on the processing thread and return its result."""
        done = threading.Event()
        box = {}

        def probe(state, _conn, _item):
            box["value"] = fn(state)
            done.set()
            return []

        self._events.put((_Probe(probe), None))
        done.wait(5.0)
        return box.get("value")

    def stop(self):
        self._stop.set()
        try:
            self.listener.close()
        except OSError:
            pass
        for conn in list(self.connections):
            conn.close()
        self._events.put((None, None))


class _Probe:
    """Pseudo-connection whose step function is replaced by a callback."""

    closed = False

    def __init__(self, fn):
        self.fn = fn


def _dispatch(step):
    def run(state, conn, item):
        if isinstance(conn, _Probe):
            return conn.fn(state, conn, item)
        return step(state, conn, item)
    return run


def start_mqtt_broker(listener) -> BrokerServer:
    return BrokerServer(listener, mqtt.MqttParser, _dispatch(mqtt.mqtt_broker_step),
                        mqtt.MqttBrokerState(), "mqtt")


def start_fanout_broker(listener) -> BrokerServer:
    return BrokerServer(listener, fanout.FrameParser, _dispatch(fanout.fanout_broker_step),
                        fanout.FanoutBrokerState(), "fanout")
