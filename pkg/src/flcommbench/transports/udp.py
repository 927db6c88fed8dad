"""Chunked datagram transport with a reliable END control channel.

Each payload is split into :class:`~flcommbench.codec.UdpChunk` datagrams.
The sender runs the chunk sequence through its link's seeded loss gate and
only transmits the survivors, then sends an END message carrying
``(msg_id, total_chunks, total_payload_len)`` over a stream connection. The
receiver zero-fills whatever did not arrive.
"""

from __future__ import annotations

import logging
import queue
import threading
import time

from .. import codec
from ..codec import EndInfo, MessageKind, UdpChunk, WireMessage
from ..netem import LinkProfile, datagram_gate
from .base import (DEFAULT_TIMEOUT, Delivery, DeviceEndpoint, Inbound, ServerEndpoint,
                   TransportError, TransportKind, accept_loop, read_hello, read_messages, spawn)

log = logging.getLogger(__name__)

END_WIRE_SIZE = codec.framed_size(codec.END_INFO.size)
_QUIET_POLLS = 5


def message_id(rnd: int, device_id: int) -> int:
    return ((rnd & 0xFFFF) << 16) | (device_id & 0xFFFF)


def send_chunked(sock, addr, payload: bytes, rnd: int, msg_id: int, keep_fn,
                 chunk_size: int) -> tuple[EndInfo, int]:
    """Transmit the chunks that survive the gate; return (END info, dropped count)."""
    total = codec.chunk_count(len(payload), chunk_size)
    if not codec.MIN_CHUNK_SIZE <= chunk_size <= codec.MAX_CHUNK_SIZE:
        raise codec.CodecError(
            f"chunk_size {chunk_size} outside [{codec.MIN_CHUNK_SIZE}, {codec.MAX_CHUNK_SIZE}]")
    keep = keep_fn(total)
    dropped = 0
    for i in range(total):
        if not keep[i]:
            dropped += 1
            continue
        body = payload[i * chunk_size:(i + 1) * chunk_size]
        sock.sendto(UdpChunk(rnd & 0xFFFF, msg_id, i, total, body).to_bytes(), addr)
    return EndInfo(msg_id, total, len(payload)), dropped


class ChunkStore:
    """Buckets incoming datagrams by msg_id until their END arrives."""

    def __init__(self, sock):
        self.sock = sock
        self._chunks: dict[int, dict[int, UdpChunk]] = {}
        self._lock = threading.Lock()

    def drain(self) -> int:
        n = 0
        with self._lock:
            while True:
                item = self.sock.recv_nowait()
                if item is None:
                    return n
                try:
                    ch = UdpChunk.from_bytes(item[0])
                except codec.CodecError as exc:
                    log.debug("dropping malformed datagram: %s", exc)
                    continue
                self._chunks.setdefault(ch.msg_id, {}).setdefault(ch.chunk_index, ch)
                n += 1

    def complete(self, end: EndInfo) -> tuple[bytes, int]:
        self.drain()
        if not getattr(self.sock, "synchronous", False):
            quiet = 0
            while len(self._chunks.get(end.msg_id, ())) < end.total_chunks and quiet < _QUIET_POLLS:
                time.sleep(0.002)
                quiet = 0 if self.drain() else quiet + 1
        with self._lock:
            got = self._chunks.pop(end.msg_id, {})
        return codec.reassemble(got.values(), end)


class UdpServer(ServerEndpoint):
    kind = TransportKind.UDP

    def __init__(self, *args, chunk_size: int = codec.DEFAULT_CHUNK_SIZE, **kw):
        super().__init__(*args, **kw)
        self.chunk_size = chunk_size
        self.sock = self.network.datagram((self.host, self.ports.udp_data))
        self.store = ChunkStore(self.sock)
        self.peers: dict[int, tuple] = {}
        self._stop = threading.Event()
        self.listener = self.network.listen((self.host, self.ports.udp_control))
        accept_loop(self.listener, self._on_connect, self._stop, "udp-ctl")

    def _on_connect(self, ch):
        try:
            hello, parser, early = read_hello(ch)
            host, port = hello.payload.decode().rsplit(":", 1)
        except (ConnectionError, TimeoutError, ValueError):
            ch.close()
            return
        dev = hello.sender_id
        if dev not in self.device_ids or dev in self.peers:
            ch.close()
            return
        self.peers[dev] = (ch, (host, int(port)))
        self._mark_connected(dev)
        read_messages(ch, lambda m: self._on_control(dev, m), lambda: self._device_lost(dev),
                      parser, early)

    def _on_control(self, dev, msg):
        if msg.kind == MessageKind.END:
            self.inbox.put(("end", dev, msg.round, EndInfo.from_bytes(msg.payload)))

    def _next_inbound(self, rnd, timeout):
        # keep the datagram socket drained while waiting for END messages
        deadline = time.monotonic() + min(timeout, 0.5)
        while True:
            self.store.drain()
            try:
                item = self.inbox.get(timeout=0.005)
                break
            except queue.Empty:
                if time.monotonic() >= deadline:
                    raise
        if item[0] != "end":
            return item
        _, dev, r, end = item
        payload, missing = self.store.complete(end)
        return Inbound(dev, r, payload,
                       Delivery(codec.chunks_wire_size(end.total_payload_len, self.chunk_size),
                                END_WIRE_SIZE, missing, datagram=True))

    def _send_global(self, rnd, payload):
        out, failed = {}, []
        for dev in self.device_ids:
            link = self.accounting.links[dev]
            try:
                ch, addr = self.peers[dev]
                end, dropped = send_chunked(
                    self.sock, addr, payload, rnd, message_id(rnd, dev),
                    lambda n: link.gate(n, ("dgram", "down", dev, rnd)), self.chunk_size)
                ch.send(codec.frame_stream_message(
                    WireMessage(MessageKind.END, rnd, codec.SERVER_ID, end.to_bytes())))
            except (ConnectionError, OSError, KeyError):
                failed.append(dev)
                continue
            out[dev] = Delivery(codec.chunks_wire_size(len(payload), self.chunk_size),
                                END_WIRE_SIZE, dropped, datagram=True)
        if failed:
            raise TransportError("control channel failure", "broadcast", rnd, failed)
        return out

    def close(self):
        super().close()
        self._stop.set()
        self.listener.close()
        for ch, _ in self.peers.values():
            ch.close()
        self.sock.close()


class UdpDevice(DeviceEndpoint):
    kind = TransportKind.UDP

    def __init__(self, device_id, network, server_host, ports, profile: LinkProfile | None = None,
                 chunk_size: int = codec.DEFAULT_CHUNK_SIZE):
        super().__init__(device_id)
        self.profile = profile or LinkProfile()
        self.chunk_size = chunk_size
        self.server_addr = (server_host, ports.udp_data)
        self.sock = network.datagram()
        self.store = ChunkStore(self.sock)
        self._ends: queue.Queue = queue.Queue()
        self.control = network.connect((server_host, ports.udp_control))
        host, port = self.sock.address[:2]
        self.control.send(codec.frame_stream_message(
            WireMessage(MessageKind.HELLO, 0, device_id, f"{host}:{port}".encode())))
        spawn(read_messages, self.control, self._on_control, lambda: self._ends.put(None),
              name=f"udp-dev{device_id}")

    def _on_control(self, msg):
        if msg.kind == MessageKind.END:
            self._ends.put((msg.round, EndInfo.from_bytes(msg.payload)))

    def receive_global(self, rnd, timeout=DEFAULT_TIMEOUT):
        return self.receive_global_ex(rnd, timeout)[0]

    def receive_global_ex(self, rnd, timeout=DEFAULT_TIMEOUT) -> tuple[bytes, int]:
        deadline = time.monotonic() + timeout
        while True:
            self.store.drain()
            try:
                item = self._ends.get(timeout=0.005)
            except queue.Empty:
                if time.monotonic() >= deadline:
                    raise TimeoutError(f"no END for round {rnd} within {timeout}s") from None
                continue
            if item is None:
                raise ConnectionError(f"control channel closed before round {rnd}")
            r, end = item
            payload, missing = self.store.complete(end)
            if r == rnd:
                return payload, missing

    def send_update(self, rnd, payload):
        end, _ = send_chunked(
            self.sock, self.server_addr, bytes(payload), rnd, message_id(rnd, self.device_id),
            lambda n: datagram_gate(self.profile, n, ("dgram", "up", self.device_id, rnd)),
            self.chunk_size)
        self.control.send(codec.frame_stream_message(
            WireMessage(MessageKind.END, rnd, self.device_id, end.to_bytes())))

    def close(self):
        self.control.close()
        self.sock.close()
