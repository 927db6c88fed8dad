import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcommbench.brokers import fanout as f
from flcommbench.brokers import mqtt as m
from flcommbench.brokers import zmtp as z
from flcommbench.brokers.server import start_fanout_broker, start_mqtt_broker
from flcommbench.channels import MemoryNetwork

H = bytes.fromhex

# -- MQTT ---------------------------------------------------------------------


@pytest.mark.parametrize("n, raw", [(0, "00"), (127, "7f"), (128, "8001"), (16383, "ff7f"),
                                    (16384, "808001"), (268_435_455, "ffffff7f")])
def test_remaining_length_vectors(n, raw):
    assert m.encode_remaining_length(n) == H(raw)
    assert m.decode_remaining_length(H(raw)) == (n, len(H(raw)))


def test_remaining_length_errors():
    with pytest.raises(m.MqttError):
        m.encode_remaining_length(268_435_456)
    with pytest.raises(m.MqttError, match="4th byte"):
        m.decode_remaining_length(H("ffffffff01"))
    assert m.decode_remaining_length(H("80")) is None


@settings(max_examples=1000)
@given(st.one_of(st.integers(0, 268_435_455), st.sampled_from([127, 128, 16383, 16384,
                                                                 2097151, 2097152])))
def test_remaining_length_roundtrip(n):
    raw = m.encode_remaining_length(n)
    assert len(raw) <= 4
    assert all(b & 0x80 for b in raw[:-1]) and not raw[-1] & 0x80
    assert m.decode_remaining_length(raw) == (n, len(raw))


topic_text = st.text(st.characters(blacklist_characters="#+\x00", blacklist_categories=("Cs",)),
                     min_size=1, max_size=30)
packets = st.one_of(
    st.builds(m.Connect, st.text(max_size=23).filter(lambda s: "\x00" not in s),
              st.integers(0, 0xFFFF), st.booleans()),
    st.builds(m.Connack, st.booleans(), st.integers(0, 5)),
    st.builds(m.Publish, topic_text, st.binary(max_size=300)),
    st.builds(m.Subscribe, st.integers(1, 0xFFFF),
              st.lists(st.tuples(topic_text, st.just(0)), min_size=1, max_size=3).map(tuple)),
    st.builds(m.Suback, st.integers(1, 0xFFFF), st.lists(st.just(0), min_size=1, max_size=3).map(tuple)),
    st.just(m.Pingreq()), st.just(m.Pingresp()), st.just(m.Disconnect()),
)


@settings(max_examples=1000)
@given(st.lists(packets, min_size=1, max_size=5), st.integers(1, 50))
def test_mqtt_packet_roundtrip_streamed(pkts, step):
    stream = b"".join(p.encode() for p in pkts)
    parser = m.MqttParser()
    out = []
    for i in range(0, len(stream), step):
        out += parser.feed(stream[i:i + step])
    assert out == pkts


@settings(max_examples=1000)
@given(st.binary(max_size=120))
def test_mqtt_parser_fuzz(data):
    try:
        m.MqttParser(max_length=1 << 16).feed(data)
    except m.MqttError:
        pass


def test_mqtt_parser_caps_remaining_length():
    with pytest.raises(m.MqttError, match="exceeds"):
        m.MqttParser(max_length=1000).feed(H("30ffff7f"))


def test_connack_and_suback_bytes():
    state = m.MqttBrokerState()
    out = m.mqtt_broker_step(state, "c1", m.Connect("dev"))
    assert [(c, p.encode()) for c, p in out] == [("c1", H("20020000"))]
    out = m.mqtt_broker_step(state, "c1", m.Subscribe(10, (("fl/#", 0),)))
    assert out[0][1].encode() == H("9003000a00")
    assert m.mqtt_broker_step(state, "c1", m.Pingreq())[0][1].encode() == H("d000")


def test_publish_fanout_and_no_retain():
    state = m.MqttBrokerState()
    for c in ("a", "b", "c"):
        m.mqtt_broker_step(state, c, m.Connect(c))
    assert m.mqtt_broker_step(state, "a", m.Publish("fl/global/1", b"x")) == []
    for c in ("a", "b", "c"):
        m.mqtt_broker_step(state, c, m.Subscribe(1, (("fl/#", 0),)))
    out = m.mqtt_broker_step(state, "a", m.Publish("fl/global/1", b"x"))
    assert sorted(c for c, _ in out) == ["a", "b", "c"]
    assert all(p == m.Publish("fl/global/1", b"x") for _, p in out)


def test_broker_protocol_violations():
    state = m.MqttBrokerState()
    with pytest.raises(m.ProtocolViolation, match="before CONNECT"):
        m.mqtt_broker_step(state, "x", m.Publish("t", b""))
    m.mqtt_broker_step(state, "x", m.Connect("x"))
    with pytest.raises(m.ProtocolViolation, match="second CONNECT"):
        m.mqtt_broker_step(state, "x", m.Connect("x"))
    assert "x" not in state.sessions


def test_topic_matching():
    assert m.topic_matches("fl/#", "fl/global/1")
    assert m.topic_matches("fl/#", "fl")
    assert m.topic_matches("#", "anything")
    assert not m.topic_matches("fl/global/1", "fl/global/2")
    assert not m.topic_matches("fl/#", "flx/1")
    with pytest.raises(m.MqttError, match="wildcard"):
        m.Publish("fl/#")


def test_one_mib_is_single_publish():
    raw = m.Publish("fl/global/1", bytes(1 << 20)).encode()
    assert m.MqttParser().feed(raw) == [m.Publish("fl/global/1", bytes(1 << 20))]
    assert len(m.encode_remaining_length(len(raw) - 4)) == 3


@settings(max_examples=300)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), max_size=30))
def test_broker_conservation_and_fifo(ops):
    state = m.MqttBrokerState()
    subs = set()
    for c in range(6):
        m.mqtt_broker_step(state, c, m.Connect(str(c)))
    received = {c: [] for c in range(6)}
    sent = 0
    for i, (c, sub) in enumerate(ops):
        if sub:
            m.mqtt_broker_step(state, c, m.Subscribe(1, (("t/#", 0),)))
            subs.add(c)
        else:
            out = m.mqtt_broker_step(state, c, m.Publish("t/x", bytes([i])))
            assert len(out) == len(subs)
            for tgt, p in out:
                received[tgt].append(p.payload[0])
            sent += 1
    for seq in received.values():
        assert seq == sorted(seq)


def test_live_mqtt_broker_roundtrip():
    net = MemoryNetwork()
    broker = start_mqtt_broker(net.listen(("mem", 1883)))
    try:
        clients = [m.MqttClient(net.connect(("mem", 1883)), f"c{i}") for i in range(3)]
        for c in clients:
            c.connect()
            c.subscribe("fl/#")
        pub = m.MqttClient(net.connect(("mem", 1883)), "pub")
        pub.connect()
        pub.publish("fl/global/1", b"hello")
        for c in clients:
            assert c.next_publish(5).payload == b"hello"
        assert broker.call(lambda s: len(s.sessions)) == 4
    finally:
        broker.stop()


# -- fan-out broker -------------------------------------------------------------

def test_fanout_frame_layout():
    assert f.declare_exchange("E").encode() == H("01 00000009 01 45 06") + b"fanout"
    assert f.Frame(f.FrameType.PUBLISH, b"").encode() == H("0400000000")


def test_fanout_semantics():
    s = f.FanoutBrokerState()
    step = lambda fr, conn="c": f.fanout_broker_step(s, conn, fr)
    step(f.declare_exchange("E"))
    step(f.declare_exchange("E"))  # idempotent
    for q in ("Q1", "Q2"):
        step(f.declare_queue(q))
        step(f.bind("E", q))
    step(f.publish("E", b"m"))
    assert list(s.queues["Q1"]) == [b"m"] and list(s.queues["Q2"]) == [b"m"]

    s2 = f.FanoutBrokerState()
    f.fanout_broker_step(s2, "c", f.declare_exchange("E"))
    assert f.fanout_broker_step(s2, "c", f.publish("E", b"m")) == []


def test_fanout_fifo_on_consume():
    s = f.FanoutBrokerState()
    for fr in (f.declare_exchange("E"), f.declare_queue("Q"), f.bind("E", "Q"),
               f.publish("E", b"m1"), f.publish("E", b"m2")):
        f.fanout_broker_step(s, "c", fr)
    out = f.fanout_broker_step(s, "c", f.consume("Q"))
    assert out[0][1].type == f.FrameType.OK
    assert [fr.body for _, fr in out[1:]] == [f.deliver("Q", b"m1").body, f.deliver("Q", b"m2").body]


def test_fanout_errors():
    s = f.FanoutBrokerState()
    out = f.fanout_broker_step(s, "c", f.publish("nope", b"m"))
    assert out[0][1].type == f.FrameType.ERROR and b"undeclared" in out[0][1].body
    out = f.fanout_broker_step(s, "c", f.bind("nope", "Q"))
    assert out[0][1].type == f.FrameType.ERROR
    f.fanout_broker_step(s, "c", f.declare_queue("Q"))
    f.fanout_broker_step(s, "c", f.consume("Q"))
    out = f.fanout_broker_step(s, "other", f.consume("Q"))
    assert out[0][1].type == f.FrameType.ERROR and b"consumer" in out[0][1].body
    with pytest.raises(f.FanoutError):
        f.name_bytes("x" * 256)


def test_default_exchange_routes_by_key():
    s = f.FanoutBrokerState()
    f.fanout_broker_step(s, "c", f.declare_queue("fl.updates"))
    f.fanout_broker_step(s, "c", f.publish("", b"u", routing_key="fl.updates"))
    f.fanout_broker_step(s, "c", f.publish("", b"lost", routing_key="missing"))
    assert list(s.queues["fl.updates"]) == [b"u"]


names = st.text(max_size=20).filter(lambda t: len(t.encode()) <= 255)
fanout_frames = st.one_of(
    st.builds(f.declare_exchange, names), st.builds(f.declare_queue, names),
    st.builds(f.bind, names, names), st.builds(f.publish, names, st.binary(max_size=200), names),
    st.builds(f.deliver, names, st.binary(max_size=200)), st.builds(f.consume, names),
    st.builds(f.error, st.text(max_size=40)),
)


@settings(max_examples=1000)
@given(st.lists(fanout_frames, min_size=1, max_size=5), st.integers(1, 40))
def test_fanout_frame_roundtrip(frames, step):
    stream = b"".join(fr.encode() for fr in frames)
    p = f.FrameParser()
    out = []
    for i in range(0, len(stream), step):
        out += p.feed(stream[i:i + step])
    assert out == frames


@settings(max_examples=1000)
@given(st.binary(max_size=100))
def test_fanout_parser_and_step_fuzz(data):
    try:
        frames = f.FrameParser(max_body=1 << 16).feed(data)
    except f.FanoutError:
        return
    state = f.FanoutBrokerState()
    for fr in frames:
        f.fanout_broker_step(state, "c", fr)


@settings(max_examples=300)
@given(st.integers(0, 6), st.lists(st.binary(max_size=8), max_size=10))
def test_fanout_conservation(nq, msgs):
    s = f.FanoutBrokerState()
    f.fanout_broker_step(s, "c", f.declare_exchange("E"))
    for i in range(nq):
        f.fanout_broker_step(s, "c", f.declare_queue(f"q{i}"))
        f.fanout_broker_step(s, "c", f.bind("E", f"q{i}"))
    for msg in msgs:
        f.fanout_broker_step(s, "c", f.publish("E", msg))
    for i in range(nq):
        assert list(s.queues[f"q{i}"]) == msgs


def test_live_fanout_broker():
    net = MemoryNetwork()
    broker = start_fanout_broker(net.listen(("mem", 5672)))
    try:
        consumers = []
        for i in range(4):
            c = f.FanoutClient(net.connect(("mem", 5672)))
            c.declare_exchange("fl.global")
            c.declare_queue(f"q{i}")
            c.bind("fl.global", f"q{i}")
            c.consume(f"q{i}")
            consumers.append(c)
        pub = f.FanoutClient(net.connect(("mem", 5672)))
        pub.publish("fl.global", b"p1")
        pub.publish("fl.global", b"p2")
        for i, c in enumerate(consumers):
            assert c.next_delivery(5) == (f"q{i}", b"p1")
            assert c.next_delivery(5) == (f"q{i}", b"p2")
    finally:
        broker.stop()


# -- ZMTP -----------------------------------------------------------------------

def test_greeting_layout():
    g = z.build_greeting()
    assert len(g) == 64
    assert g[0] == 0xFF and g[9] == 0x7F and g[10:12] == H("0300")
    assert g[12:32] == b"NULL" + bytes(16) and g[32] == 0 and g[33:] == bytes(31)
    assert z.parse_greeting(g) == z.Greeting((3, 0), b"NULL", False)


@pytest.mark.parametrize("offset, value, needle", [(0, 0x00, "signature"), (9, 0x00, "signature"),
                                                   (10, 2, "version"), (12, ord("X"), "mechanism")])
def test_greeting_errors_name_offset(offset, value, needle):
    g = bytearray(z.build_greeting())
    g[offset] = value
    with pytest.raises(z.HandshakeError, match=needle) as exc:
        z.parse_greeting(bytes(g))
    assert exc.value.offset == offset
    assert f"offset {offset}" in str(exc.value)


def test_frame_vectors():
    assert z.zmtp_frame(0, b"hi") == H("00026869")
    long = z.zmtp_frame(0, bytes(300))
    assert long[:9] == H("02000000000000012c")
    assert z.zmtp_parse(long) == [z.Frame(bytes(300))]
    assert z.subscription(b"fl") == H("0003") + b"\x01fl"
    assert z.parse_subscription(z.zmtp_parse(z.subscription(b"fl"))[0]) == (True, b"fl")
    with pytest.raises(z.ZmtpError, match="reserved"):
        z.zmtp_frame(0x08, b"")


def test_ready_command_metadata():
    frame = z.zmtp_parse(z.ready_command("PUB", b"3"))[0]
    assert frame.command
    name, meta = z.decode_command(frame)
    assert name == "READY"
    assert z.decode_metadata(meta) == {"Socket-Type": b"PUB", "Identity": b"3"}


zframes = st.builds(z.Frame, st.binary(max_size=600), st.booleans(), st.booleans())


@settings(max_examples=1000)
@given(st.lists(zframes, min_size=1, max_size=5), st.integers(1, 100))
def test_zmtp_frame_roundtrip(frames, step):
    stream = b"".join(fr.encode() for fr in frames)
    p = z.FrameParser()
    out = []
    for i in range(0, len(stream), step):
        out += p.feed(stream[i:i + step])
    assert out == frames


@settings(max_examples=1000)
@given(st.booleans(), st.binary(min_size=64, max_size=64))
def test_zmtp_greeting_roundtrip_and_fuzz(as_server, junk):
    assert z.parse_greeting(z.build_greeting(as_server)).as_server == as_server
    try:
        z.parse_greeting(junk)
    except z.HandshakeError:
        pass


@settings(max_examples=1000)
@given(st.binary(max_size=100))
def test_zmtp_parser_fuzz(data):
    try:
        for fr in z.FrameParser(max_body=1 << 16).feed(data):
            if fr.command:
                name, meta = z.decode_command(fr)
                z.decode_metadata(meta)
    except z.ZmtpError:
        pass


def _session_pair(server_role="PUB", client_role="SUB", tamper=None):
    net = MemoryNetwork()
    lst = net.listen(("mem", 9010))
    box = {}

    def serve():
        ch = lst.accept(5)
        try:
            box["server"] = z.zmtp_handshake(ch, server_role, peer="client")
        except z.ZmtpError as exc:
            box["error"] = exc

    t = threading.Thread(target=serve)
    t.start()
    ch = net.connect(("mem", 9010))
    if tamper is not None:
        g = bytearray(z.build_greeting())
        g[tamper] ^= 0xFF
        ch.send(bytes(g))
        ch.recv_exact(64, 5)
        t.join(5)
        return box
    box["client"] = z.zmtp_handshake(ch, client_role, identity=b"7")
    t.join(5)
    return box


def test_handshake_and_pubsub():
    box = _session_pair()
    pub, sub = box["server"], box["client"]
    assert pub.peer_type == "SUB" and pub.peer_identity == b"7"
    sub.subscribe(b"fl")
    assert z.parse_subscription(pub.next_frame(5)) == (True, b"fl")
    pub.send_message([b"fl.global", b"payload"])
    assert sub.recv_message(5) == [b"fl.global", b"payload"]


def test_handshake_bad_signature_names_peer():
    box = _session_pair(tamper=0)
    err = box["error"]
    assert isinstance(err, z.HandshakeError)
    assert err.offset == 0 and err.peer == "client"


def test_handshake_incompatible_sockets():
    with pytest.raises(z.HandshakeError, match="cannot talk"):
        _session_pair("PUB", "PUB")
