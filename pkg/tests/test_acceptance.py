"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line with the measured values; the lines are
printed together at the end of the pytest run (see ``conftest.py``).
"""

import contextlib
import statistics

import pytest

import test_brokers
import test_codec
import test_fl
from flcommbench.config import BenchmarkConfig
from flcommbench.netem import PRESETS_BPS, Link, LinkProfile, TokenBucket, datagram_gate
from flcommbench.runner import run_benchmark

RESULTS: dict[int, str] = {}
PROTOCOLS = ("tcp", "udp", "mqtt", "amqp", "zmtp")
LOSSES = (0.0, 5.0, 10.0, 20.0)
GOLDEN_FINAL_ACCURACY = 0.847


@contextlib.contextmanager
def criterion(n, title):
    info = {}
    try:
        yield info
    except BaseException as exc:
        RESULTS[n] = f"C{n:<2} FAIL  {title}: {info.get('detail', '')} [{type(exc).__name__}: {exc}]"
        raise
    RESULTS[n] = f"C{n:<2} PASS  {title}: {info.get('detail', '')}"


def _total(**kw):
    return run_benchmark(BenchmarkConfig(**kw)).totals["comm_time_s"]


def test_c01_determinism():
    with criterion(1, "default run twice gives identical report data") as c:
        a, b = run_benchmark(BenchmarkConfig()), run_benchmark(BenchmarkConfig())
        c["detail"] = f"sha256 {a.model_sha256[:12]}"
        assert a.data_json() == b.data_json()


def test_c02_fidelity_across_protocols():
    with criterion(2, "all protocols produce identical params and accuracy at loss 0") as c:
        reps = {p: run_benchmark(BenchmarkConfig(protocol=p, preset="wifi")) for p in PROTOCOLS}
        shas = {r.model_sha256 for r in reps.values()}
        series = {tuple(x.accuracy for x in r.rounds) for r in reps.values()}
        c["detail"] = f"{len(shas)} distinct model(s), accuracy {list(series)[0] if len(series) == 1 else series}"
        assert len(shas) == 1 and len(series) == 1


def test_c03_broker_fanout_speedup():
    with criterion(3, "broker fan-out beats sequential TCP broadcast") as c:
        wifi = {p: _total(protocol=p, preset="wifi") for p in ("tcp", "mqtt", "amqp")}
        g3 = {p: _total(protocol=p, preset="3g") for p in ("tcp", "amqp")}
        ratio, ratio3 = wifi["tcp"] / wifi["amqp"], g3["tcp"] / g3["amqp"]
        mq = abs(wifi["mqtt"] - wifi["amqp"]) / wifi["amqp"]
        c["detail"] = f"wifi tcp/amqp {ratio:.3f}, mqtt vs amqp {mq:.2e}, 3g tcp/amqp {ratio3:.3f}"
        assert 1.5 <= ratio <= 4.0 and mq <= 0.15 and ratio3 >= 1.4


def test_c04_tcp_loss_sensitivity():
    with criterion(4, "TCP comm time grows with loss (30 seeds)") as c:
        means = [statistics.fmean(_total(model="tiny", preset="wifi", loss_pct=loss, seed=s)
                                  for s in range(30)) for loss in LOSSES]
        c["detail"] = "means " + ", ".join(f"{l:g}%={m:.4f}s" for l, m in zip(LOSSES, means))
        assert all(a < b for a, b in zip(means, means[1:]))
        assert means[-1] >= 1.5 * means[0]


def test_c05_udp_loss_insensitivity():
    with criterion(5, "UDP comm time flat across loss") as c:
        times = [_total(protocol="udp", preset="wifi", loss_pct=loss) for loss in LOSSES]
        spread = (max(times) - min(times)) / min(times)
        c["detail"] = f"times {[round(t, 4) for t in times]}, spread {spread:.2%}"
        assert spread < 0.10


def test_c06_udp_accuracy_degradation():
    with criterion(6, "UDP final accuracy drops at 20% loss (5 seeds)") as c:
        acc = {loss: statistics.fmean(
            run_benchmark(BenchmarkConfig(protocol="udp", preset="wifi", loss_pct=loss, seed=s))
            .totals["final_accuracy"] for s in range(5)) for loss in (0.0, 20.0)}
        c["detail"] = f"0%={acc[0.0]:.4f}, 20%={acc[20.0]:.4f}"
        assert acc[20.0] < acc[0.0]


def test_c07_shaping_accuracy():
    with criterion(7, "1 MiB at 20 Mbps takes 0.419 s; presets 5/20/60 Mbps") as c:
        link = Link(LinkProfile(20_000_000), burst_bytes=0)
        t = link.stream(1 << 20, "down", 0.0, "c7").duration
        d = TokenBucket(20_000_000, burst_bytes=0).acquire(1 << 20, 0.0)
        c["detail"] = f"stream {t:.4f}s, bucket {d:.4f}s"
        assert t == pytest.approx(0.419, rel=0.10) and d == pytest.approx(0.419, rel=0.10)
        assert (PRESETS_BPS["3g"], PRESETS_BPS["4g"], PRESETS_BPS["wifi"]) == \
            (5_000_000, 20_000_000, 60_000_000)


def test_c08_loss_statistics():
    with criterion(8, "datagram drops and stream retransmissions match binomial models") as c:
        drops = datagram_gate(LinkProfile(None, 0.10, seed=8), 10_000, ("dgram", 0)).count(False)
        segs = -(-(10 << 20) // 1448)
        retx = Link(LinkProfile(None, 0.10, seed=8)).stream(10 << 20, "down", 0.0, "c8").retransmissions
        mean, sd = segs * 0.1 / 0.9, (segs * 0.1) ** 0.5 / 0.9
        c["detail"] = f"drops {drops}/10000, retx {retx} (expected {mean:.0f} +- {3 * sd:.0f})"
        assert 880 <= drops <= 1120
        assert abs(retx - mean) <= 3 * sd


def test_c09_fedavg_and_gradient_oracles():
    with criterion(9, "FedAvg brute-force oracle (200 cases) and gradient check") as c:
        test_fl.test_fedavg_brute_force_oracle()
        test_fl.test_gradient_matches_finite_differences()
        c["detail"] = "200 instances within 1e-6, sampled gradients within 1e-3"


CODEC_SUITES = [
    test_codec.test_stream_parse_roundtrip_any_split, test_codec.test_stream_parser_fuzz,
    test_codec.test_chunk_roundtrip_and_zero_fill, test_codec.test_chunk_parser_fuzz,
    test_brokers.test_remaining_length_roundtrip, test_brokers.test_mqtt_packet_roundtrip_streamed,
    test_brokers.test_mqtt_parser_fuzz, test_brokers.test_fanout_frame_roundtrip,
    test_brokers.test_fanout_parser_and_step_fuzz, test_brokers.test_zmtp_frame_roundtrip,
    test_brokers.test_zmtp_greeting_roundtrip_and_fuzz, test_brokers.test_zmtp_parser_fuzz,
]


def test_c10_protocol_codecs():
    with criterion(10, "codec round-trip and fuzz suites, >=1000 cases each") as c:
        for suite in CODEC_SUITES:
            assert suite.hypothesis.inner_test is not None
            assert suite._hypothesis_internal_use_settings.max_examples >= 1000
            suite()
        for n, raw in ((127, "7f"), (128, "8001"), (16383, "ff7f"), (16384, "808001")):
            test_brokers.test_remaining_length_vectors(n, raw)
        c["detail"] = f"{len(CODEC_SUITES)} suites passed"


def test_c11_net_stress_effect():
    with criterion(11, "250 Mbit/s background load slows every protocol on wifi") as c:
        base = {p: _total(protocol=p, preset="wifi") for p in PROTOCOLS}
        stressed = {p: _total(protocol=p, preset="wifi", stress=_net()) for p in PROTOCOLS}
        inc = {p: stressed[p] - base[p] for p in PROTOCOLS}
        c["detail"] = ", ".join(f"{p} +{inc[p]:.1f}s" for p in PROTOCOLS)
        assert all(stressed[p] > base[p] for p in PROTOCOLS)
        assert inc["tcp"] > inc["amqp"]


def _net():
    from flcommbench.stressors import StressSpec

    return StressSpec("net", net_offered_bps=250e6)


def test_c12_learning_sanity():
    with criterion(12, "default run learns well past the 0.1 baseline") as c:
        rep = run_benchmark(BenchmarkConfig())
        final = rep.totals["final_accuracy"]
        c["detail"] = f"final accuracy {final:.4f} (golden {GOLDEN_FINAL_ACCURACY})"
        assert final > 0.5
        assert final == pytest.approx(GOLDEN_FINAL_ACCURACY, abs=5e-4)
        assert rep.initial_accuracy < final
