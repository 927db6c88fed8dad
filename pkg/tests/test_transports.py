import numpy as np
import pytest

from flcommbench import codec
from flcommbench.brokers import zmtp as z
from flcommbench.channels import MemoryNetwork
from flcommbench.netem import Clock, Link, LinkProfile
from flcommbench.transports import (HandshakeFailure, IncompleteRound, Ports, TransportKind,
                                    connect_all)
from flcommbench.transports.zmtp import ZmtpDevice

KINDS = [k.value for k in TransportKind]


def _links(n=4, preset="unlimited", loss=0.0):
    return {d: Link(LinkProfile.from_preset(preset, loss, seed=100 + d)) for d in range(n)}


def _up(kind, links, **kw):
    events = []
    server, devices = connect_all(kind, links, record=events.append, **kw)
    return server, devices, events


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_every_protocol(kind):
    server, devices, events = _up(kind, _links())
    try:
        payload = bytes(range(256)) * 40
        server.broadcast_global(1, payload)
        for d in devices:
            assert d.receive_global(1, 5) == payload
        for d in devices:
            d.send_update(1, bytes([d.device_id]) * 100)
        got = server.collect_updates(1, timeout=5)
        assert [(dev, body) for dev, body, _ in got] == [(i, bytes([i]) * 100) for i in range(4)]
        assert sorted((e.direction, e.device_id) for e in events) == sorted(
            [("down", i) for i in range(4)] + [("up", i) for i in range(4)])
    finally:
        for d in devices:
            d.close()
        server.close()


def test_mqtt_broker_sessions():
    server, devices, _ = _up("mqtt", _links())
    try:
        assert server.session_count() == 5
        assert server.subscribed_devices() >= {0, 1, 2, 3}
    finally:
        for d in devices:
            d.close()
        server.close()


def test_tcp_broadcast_is_sequential_on_wifi():
    links = _links(preset="wifi")
    server, devices, events = _up("tcp", links)
    try:
        t = server.broadcast_global(1, bytes(1 << 20))
        down = sorted(events, key=lambda e: e.device_id)
        for a, b in zip(down, down[1:]):
            assert b.start == pytest.approx(a.end)
        per = (1 << 20) / (links[0].profile.bandwidth_bps / 8)
        assert t == pytest.approx(4 * per, rel=0.1)
    finally:
        for d in devices:
            d.close()
        server.close()


@pytest.mark.parametrize("kind", ["mqtt", "amqp", "zmtp"])
def test_broker_broadcast_is_concurrent(kind):
    server, devices, events = _up(kind, _links(preset="wifi"))
    try:
        server.broadcast_global(1, bytes(1 << 20))
        starts = {e.start for e in events}
        assert len(starts) == 1
    finally:
        for d in devices:
            d.close()
        server.close()


@pytest.mark.parametrize("kind", KINDS)
def test_empty_payload(kind):
    server, devices, _ = _up(kind, _links(2))
    try:
        server.broadcast_global(1, b"")
        for d in devices:
            assert d.receive_global(1, 5) == b""
    finally:
        for d in devices:
            d.close()
        server.close()


def test_empty_global_frame_is_nine_bytes():
    msg = codec.WireMessage(codec.MessageKind.GLOBAL_MODEL, 1, codec.SERVER_ID, b"")
    assert len(codec.frame_stream_message(msg)) == 9 == codec.framed_size(0)


def test_udp_lossless_and_total_loss():
    payload = encode = codec.encode_params(np.arange(2762, dtype=np.float32))
    server, devices, _ = _up("udp", _links(2))
    try:
        server.broadcast_global(1, payload)
        for d in devices:
            assert d.receive_global_ex(1, 5) == (encode, 0)
    finally:
        for d in devices:
            d.close()
        server.close()

    server, devices, events = _up("udp", _links(2, loss=1.0))
    try:
        server.broadcast_global(1, payload)
        total = -(-len(payload) // 1400)
        for d in devices:
            body, missing = d.receive_global_ex(1, 5)
            assert missing == total and body == bytes(len(payload))
        assert all(e.missing_chunks == total for e in events)
    finally:
        for d in devices:
            d.close()
        server.close()


def test_udp_drop_fraction():
    n_chunks = 10_000
    server, devices, events = _up("udp", _links(1, loss=0.2), chunk_size=100)
    try:
        server.broadcast_global(1, bytes(100 * n_chunks))
        _, missing = devices[0].receive_global_ex(1, 10)
        assert 1880 <= missing <= 2120
        assert events[0].missing_chunks == missing
    finally:
        devices[0].close()
        server.close()


def test_zmtp_bad_signature_is_handshake_failure():
    net = MemoryNetwork("mem")
    lst = net.listen(("mem", Ports.zmtp_pub))
    import threading

    def bogus_server():
        ch = lst.accept(5)
        g = bytearray(z.build_greeting(True))
        g[0] = 0x00
        ch.send(bytes(g))

    threading.Thread(target=bogus_server, daemon=True).start()
    with pytest.raises(HandshakeFailure, match="signature"):
        ZmtpDevice(0, net, "mem", Ports())
    lst.close()


def test_zmtp_prefix_filtering():
    net = MemoryNetwork("mem")
    server, devices = connect_all("zmtp", _links(1), network=net)
    stray = None
    try:
        stray = ZmtpDevice(1, net, "mem", Ports(), prefix=b"xx")
        assert server.publish(b"fl.global", b"x") == [0]
        assert stray._inbox is not None
        with pytest.raises(TimeoutError):
            stray.receive_global(1, 0.3)
    finally:
        if stray is not None:
            stray.close()
        devices[0].close()
        server.close()


@pytest.mark.parametrize("kind", ["mqtt", "amqp"])
def test_updates_keep_round_isolation(kind):
    server, devices, _ = _up(kind, _links(2))
    try:
        server.broadcast_global(1, b"g1")
        for d in devices:
            d.receive_global(1, 5)
            d.send_update(1, b"u1")
        assert [b for _, b, _ in server.collect_updates(1, timeout=5)] == [b"u1", b"u1"]
        server.broadcast_global(2, b"g2")
        for d in devices:
            assert d.receive_global(2, 5) == b"g2"
            d.send_update(2, b"u2")
        assert [b for _, b, _ in server.collect_updates(2, timeout=5)] == [b"u2", b"u2"]
    finally:
        for d in devices:
            d.close()
        server.close()


@pytest.mark.parametrize("kind", KINDS)
def test_lost_device_aborts_collection(kind):
    server, devices, _ = _up(kind, _links(2))
    try:
        server.broadcast_global(1, b"g")
        devices[0].receive_global(1, 5)
        devices[0].send_update(1, b"u")
        server._device_lost(1, "disconnected")
        with pytest.raises(IncompleteRound) as exc:
            server.collect_updates(1, timeout=5)
        assert exc.value.devices == [1] and exc.value.phase == "upload"
    finally:
        for d in devices:
            d.close()
        server.close()


def test_collection_timeout_names_missing_devices():
    server, devices, _ = _up("tcp", _links(3))
    try:
        server.broadcast_global(1, b"g")
        devices[2].send_update(1, b"u")
        with pytest.raises(IncompleteRound, match=r"devices=\[0, 1\]"):
            server.collect_updates(1, timeout=0.5)
    finally:
        for d in devices:
            d.close()
        server.close()


def test_wall_clock_accounting_runs():
    server, devices, events = _up("tcp", _links(1), clock=Clock("wall"))
    try:
        server.broadcast_global(1, bytes(1000))
        assert devices[0].receive_global(1, 5) == bytes(1000)
        assert events[0].end >= events[0].start
    finally:
        devices[0].close()
        server.close()
