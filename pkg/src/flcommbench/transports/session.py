"""Registration and shutdown channel between the orchestrator and devices.

Every device opens one framed stream to the session port before touching a
transport. The exchange is::

    device -> HELLO  {"run_id": ...}          sender_id = device id
    server -> HELLO  {welcome: run parameters}   or END {"error": ...}
    device -> HELLO  {"ready": true}             once its transport endpoint is up
    ...
    server -> END    {"shutdown": true}

The channel stays open for the whole run, so a device that dies is noticed
here even when its transport connection goes through a broker.
"""

from __future__ import annotations

import json
import logging
import threading
import time

from .. import codec
from ..codec import MessageKind, WireMessage
from .base import DEFAULT_TIMEOUT, accept_loop, read_hello, read_messages, spawn

log = logging.getLogger(__name__)


class RegistrationError(ConnectionError):
    pass


def _msg(kind: MessageKind, sender: int, doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True).encode()
    return codec.frame_stream_message(WireMessage(kind, 0, sender, body))


def _doc(msg: WireMessage) -> dict:
    try:
        doc = json.loads(bytes(msg.payload).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise codec.CodecError(f"session message is not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise codec.CodecError("session message must be a JSON object")
    return doc


class SessionServer:
    """Accepts registrations for ``device_ids`` under ``run_id``.

    ``welcome_fn(device_id)`` returns the JSON-serialisable welcome document.
    ``on_lost(device_id, reason)`` fires when a registered device's session
    drops before :meth:`shutdown`.
    """

    def __init__(self, network, addr, run_id: str, device_ids, welcome_fn, on_lost=None):
        self.run_id = run_id
        self.device_ids = sorted(device_ids)
        self.welcome_fn = welcome_fn
        self.on_lost = on_lost
        self.rejected: list[tuple[int, str]] = []
        self._channels: dict[int, object] = {}
        self._ready: set[int] = set()
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._shutting_down = False
        self.listener = network.listen(addr)
        accept_loop(self.listener, self._on_connect, self._stop, "session")

    def _reject(self, ch, dev, reason):
        log.warning("rejecting device %s: %s", dev, reason)
        with self._cond:
            self.rejected.append((dev, reason))
            self._cond.notify_all()
        try:
            ch.send(_msg(MessageKind.END, codec.SERVER_ID, {"error": reason}))
        except (ConnectionError, OSError):
            pass
        ch.close()

    def _on_connect(self, ch):
        try:
            hello, parser, early = read_hello(ch)
            doc = _doc(hello)
        except (ConnectionError, TimeoutError, codec.CodecError) as exc:
            log.warning("bad session HELLO: %s", exc)
            ch.close()
            return
        dev = hello.sender_id
        if doc.get("run_id") != self.run_id:
            return self._reject(ch, dev, f"run-id mismatch: got {doc.get('run_id')!r}")
        with self._cond:
            if dev not in self.device_ids:
                reason = f"unknown device id {dev}; expected one of {self.device_ids}"
            elif dev in self._channels:
                reason = f"device id {dev} already registered"
            else:
                reason = None
                self._channels[dev] = ch
        if reason:
            return self._reject(ch, dev, reason)
        ch.send(_msg(MessageKind.HELLO, codec.SERVER_ID, self.welcome_fn(dev)))
        with self._cond:
            self._cond.notify_all()
        read_messages(ch, lambda m: self._on_message(dev, m), lambda: self._on_close(dev),
                      parser, early)

    def _on_message(self, dev, msg):
        if msg.kind == MessageKind.HELLO and _doc(msg).get("ready"):
            with self._cond:
                self._ready.add(dev)
                self._cond.notify_all()

    def _on_close(self, dev):
        with self._cond:
            lost = not self._shutting_down
            self._channels.pop(dev, None)
            self._ready.discard(dev)
            self._cond.notify_all()
        if lost and self.on_lost is not None:
            self.on_lost(dev, "session lost (device disconnected)")

    def _wait(self, members, what, timeout):
        from .base import TransportError

        with self._cond:
            ok = self._cond.wait_for(lambda: set(members()) >= set(self.device_ids), timeout)
            if not ok:
                missing = set(self.device_ids) - set(members())
                raise TransportError(f"{what} timed out after {timeout}s", "setup", None, missing)

    def wait_registered(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._wait(lambda: self._channels, "registration", timeout)

    def wait_ready(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._wait(lambda: self._ready, "device readiness", timeout)

    def shutdown(self) -> None:
        with self._cond:
            self._shutting_down = True
            channels = list(self._channels.values())
        for ch in channels:
            try:
                ch.send(_msg(MessageKind.END, codec.SERVER_ID, {"shutdown": True}))
            except (ConnectionError, OSError):
                pass

    def close(self) -> None:
        with self._cond:
            self._shutting_down = True
        self._stop.set()
        self.listener.close()
        for ch in list(self._channels.values()):
            ch.close()


class SessionClient:
    """Device side of the session channel."""

    def __init__(self, network, addr, run_id: str, device_id: int):
        self.network = network
        self.addr = addr
        self.run_id = run_id
        self.device_id = device_id
        self.channel = None
        self.welcome: dict | None = None
        self._shutdown = threading.Event()
        self._closed = threading.Event()

    def register(self, timeout: float = DEFAULT_TIMEOUT) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.channel = self.network.connect(self.addr, timeout=max(0.1, deadline - time.monotonic()))
                break
            except (ConnectionError, TimeoutError, OSError) as exc:
                if time.monotonic() >= deadline:
                    raise RegistrationError(
                        f"registration timeout: server {self.addr} unreachable ({exc})") from None
                time.sleep(0.05)
        self.channel.send(_msg(MessageKind.HELLO, self.device_id, {"run_id": self.run_id}))
        try:
            reply, parser, early = _read_first(self.channel, max(0.1, deadline - time.monotonic()))
        except TimeoutError:
            self.channel.close()
            raise RegistrationError("registration timeout: no welcome from server") from None
        except ConnectionError:
            self.channel.close()
            raise RegistrationError("server closed the session during registration") from None
        doc = _doc(reply)
        if reply.kind == MessageKind.END:
            self.channel.close()
            raise RegistrationError(f"registration rejected: {doc.get('error', 'unknown reason')}")
        self.welcome = doc
        spawn(read_messages, self.channel, self._on_message, self._closed.set, parser, early,
              name=f"session-dev{self.device_id}")
        return doc

    def _on_message(self, msg):
        if msg.kind == MessageKind.END:
            self._shutdown.set()

    def ready(self) -> None:
        self.channel.send(_msg(MessageKind.HELLO, self.device_id, {"ready": True}))

    @property
    def shutdown_requested(self) -> bool:
        return self._shutdown.is_set()

    def wait_shutdown(self, timeout: float | None = None) -> bool:
        """True on a shutdown message; False if the session dropped or timed out."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._shutdown.is_set():
            if self._closed.is_set():
                return self._shutdown.is_set()
            if deadline is not None and time.monotonic() >= deadline:
                return False
            self._shutdown.wait(0.05)
        return True

    def close(self) -> None:
        if self.channel is not None:
            self.channel.close()


def _read_first(channel, timeout):
    parser = codec.StreamParser()
    deadline = time.monotonic() + timeout
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            raise TimeoutError("no session reply")
        data = channel.recv(left)
        if not data:
            raise ConnectionError("session closed")
        msgs = parser.feed(data)
        if msgs:
            return msgs[0], parser, msgs[1:]
