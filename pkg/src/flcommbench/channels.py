"""Byte channels over which every protocol runs.

:class:`MemoryNetwork` connects in-process actors through blocking pipes;
:class:`SocketNetwork` uses real TCP/UDP sockets. Protocol code only sees the
:class:`StreamChannel`/:class:`DatagramSocket` interfaces, so in-process and
distributed runs execute the same code paths.
"""

from __future__ import annotations

import collections
import queue
import select
import socket
import threading
import time

Address = tuple[str, int]


class ChannelClosed(ConnectionError):
    pass


class ConnectTimeout(TimeoutError):
    pass


class StreamChannel:
    """Reliable ordered byte stream."""

    def send(self, data) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> bytes:
        """Next available bytes; ``b""`` at end of stream.

        Raises :class:`TimeoutError` if nothing arrives within ``timeout``.
        """
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def recv_exact(self, n: int, timeout: float | None = None) -> bytes:
        buf = bytearray()
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(buf) < n:
            chunk = self._recv_upto(n - len(buf), _remaining(deadline))
            if not chunk:
                raise ChannelClosed(f"stream closed after {len(buf)} of {n} bytes")
            buf += chunk
        return bytes(buf)

    def _recv_upto(self, n: int, timeout: float | None) -> bytes:
        raise NotImplementedError


def _remaining(deadline):
    if deadline is None:
        return None
    left = deadline - time.monotonic()
    if left <= 0:
        raise TimeoutError("timed out waiting for data")
    return left


class _Pipe:
    def __init__(self):
        self._chunks = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def write(self, data) -> None:
        with self._cond:
            if self._closed:
                raise ChannelClosed("write to closed channel")
            if data:
                self._chunks.append(bytes(data))
                self._cond.notify_all()

    def read(self, limit: int | None, timeout: float | None) -> bytes:
        with self._cond:
            if not self._cond.wait_for(lambda: self._chunks or self._closed, timeout):
                raise TimeoutError("timed out waiting for data")
            if not self._chunks:
                return b""
            head = self._chunks[0]
            if limit is None or len(head) <= limit:
                return self._chunks.popleft()
            self._chunks[0] = head[limit:]
            return head[:limit]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class MemoryStream(StreamChannel):
    def __init__(self, inbound: _Pipe, outbound: _Pipe, peer: Address | None = None):
        self._in = inbound
        self._out = outbound
        self.peer = peer

    def send(self, data) -> None:
        self._out.write(data)

    def recv(self, timeout: float | None = None) -> bytes:
        return self._in.read(None, timeout)

    def _recv_upto(self, n, timeout):
        return self._in.read(n, timeout)

    def close(self) -> None:
        self._out.close()
        self._in.close()


class SocketStream(StreamChannel):
    RECV_SIZE = 1 << 20

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.peer = sock.getpeername()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        # stays blocking: a reader and a writer thread may share the socket,
        # so receive timeouts go through select() instead of settimeout()
        sock.settimeout(None)

    def send(self, data) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv(self, timeout: float | None = None) -> bytes:
        return self._recv_upto(self.RECV_SIZE, timeout)

    def _recv_upto(self, n, timeout):
        try:
            if timeout is not None:
                ready, _, _ = select.select([self.sock], [], [], max(timeout, 0.0))
                if not ready:
                    raise TimeoutError("timed out waiting for data")
            return self.sock.recv(n)
        except (OSError, ValueError) as exc:
            if isinstance(exc, TimeoutError):
                raise
            return b""

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Listener:
    def accept(self, timeout: float | None = None) -> StreamChannel:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class DatagramSocket:
    address: Address

    def sendto(self, data: bytes, addr: Address) -> None:
        raise NotImplementedError

    def recv_nowait(self) -> tuple[bytes, Address] | None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class _MemoryListener(Listener):
    def __init__(self, net: "MemoryNetwork", addr: Address):
        self.net = net
        self.address = addr
        self._pending: queue.Queue = queue.Queue()

    def accept(self, timeout=None):
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no connection on {self.address} within {timeout}s") from None

    def close(self):
        self.net._unlisten(self.address)


class _MemoryDatagram(DatagramSocket):
    synchronous = True  # sendto() has delivered by the time it returns

    def __init__(self, net, addr):
        self.net = net
        self.address = addr
        self.inbox: collections.deque = collections.deque()

    def sendto(self, data, addr):
        target = self.net._datagrams.get(tuple(addr))
        if target is not None:
            target.inbox.append((bytes(data), self.address))

    def recv_nowait(self):
        try:
            return self.inbox.popleft()
        except IndexError:
            return None

    def close(self):
        self.net._datagrams.pop(self.address, None)


class MemoryNetwork:
    """In-process address space of listeners and datagram sockets."""

    def __init__(self, host: str = "mem"):
        self.host = host
        self._lock = threading.Lock()
        self._listeners: dict[Address, _MemoryListener] = {}
        self._datagrams: dict[Address, _MemoryDatagram] = {}
        self._next_port = 40000

    def listen(self, addr: Address) -> Listener:
        addr = tuple(addr)
        with self._lock:
            if addr in self._listeners:
                raise OSError(f"address {addr} already in use")
            lst = self._listeners[addr] = _MemoryListener(self, addr)
        return lst

    def _unlisten(self, addr):
        with self._lock:
            self._listeners.pop(addr, None)

    def connect(self, addr: Address, timeout: float = 10.0) -> StreamChannel:
        addr = tuple(addr)
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                lst = self._listeners.get(addr)
            if lst is not None:
                a, b = _Pipe(), _Pipe()
                lst._pending.put(MemoryStream(a, b))
                return MemoryStream(b, a, addr)
            if time.monotonic() > deadline:
                raise ConnectTimeout(f"could not connect to {addr} within {timeout}s")
            time.sleep(0.002)

    def datagram(self, addr: Address | None = None) -> DatagramSocket:
        with self._lock:
            if addr is None:
                self._next_port += 1
                addr = (self.host, self._next_port)
            addr = tuple(addr)
            if addr in self._datagrams:
                raise OSError(f"datagram address {addr} already in use")
            sock = self._datagrams[addr] = _MemoryDatagram(self, addr)
        return sock


class _SocketListener(Listener):
    def __init__(self, addr):
        self.sock = socket.create_server(tuple(addr), reuse_port=False, backlog=64)
        self.address = self.sock.getsockname()

    def accept(self, timeout=None):
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError(f"no connection on {self.address} within {timeout}s") from None
        return SocketStream(conn)

    def close(self):
        self.sock.close()


class _SocketDatagram(DatagramSocket):
    synchronous = False
    PACE_EVERY = 32

    def __init__(self, addr):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
            try:
                self.sock.setsockopt(socket.SOL_SOCKET, opt, 32 * 1024 * 1024)
            except OSError:
                pass
        self.sock.bind(tuple(addr))
        self.sock.setblocking(False)
        self.address = self.sock.getsockname()
        self._sent = 0

    def sendto(self, data, addr):
        # yield periodically so a co-located receiver can drain its buffer
        self._sent += 1
        if self._sent % self.PACE_EVERY == 0:
            time.sleep(0.0002)
        while True:
            try:
                self.sock.sendto(data, tuple(addr))
                return
            except BlockingIOError:
                select.select([], [self.sock], [], 0.1)

    def recv_nowait(self):
        try:
            return self.sock.recvfrom(65535)
        except (BlockingIOError, InterruptedError):
            return None

    def close(self):
        self.sock.close()


class SocketNetwork:
    """Real sockets; ``host`` is the local bind address for datagrams."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host

    def listen(self, addr: Address) -> Listener:
        return _SocketListener(addr)

    def connect(self, addr: Address, timeout: float = 10.0) -> StreamChannel:
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection(tuple(addr), timeout=max(0.1, deadline - time.monotonic()))
                return SocketStream(sock)
            except OSError:
                if time.monotonic() > deadline:
                    raise ConnectTimeout(f"could not connect to {addr} within {timeout}s") from None
                time.sleep(0.05)

    def datagram(self, addr: Address | None = None) -> DatagramSocket:
        return _SocketDatagram(addr or (self.host, 0))
