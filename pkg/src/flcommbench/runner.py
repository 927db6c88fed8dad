"""Orchestration of benchmark runs, sweeps and distributed device agents.

In-process runs start one thread per device; distributed runs wait for
``agent`` processes. Both kinds of device run :func:`device_loop`, and all
link accounting happens on the orchestrator, so the two modes produce the
same report data for the same seed.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, fl, kernels
from .channels import MemoryNetwork, SocketNetwork
from .codec import decode_params, encode_params
from .config import BenchmarkConfig
from .metrics import Collector, RunReport, export_plot_csv, utc_timestamp, write_report
from .netem import Clock, Link, LinkProfile
from .stressors import CpuStress, NetStress
from .transports import Accounting, Ports, TransportError, open_device, open_server
from .transports.session import RegistrationError, SessionClient, SessionServer

log = logging.getLogger(__name__)

FEATURES, CLASSES = fl.DEFAULT_ARCH[0], fl.DEFAULT_ARCH[-1]
PARAM_COUNT = fl.param_count()


class RunFailed(RuntimeError):
    """A run aborted; ``cause`` is the transport/timeout error behind it."""

    def __init__(self, message, cause=None):
        super().__init__(message)
        self.cause = cause


def welcome_doc(cfg: BenchmarkConfig, device_id: int) -> dict:
    return {
        "protocol": cfg.protocol.value, "rounds": cfg.rounds, "seed": cfg.seed,
        "devices": cfg.devices, "device_id": device_id, "model": cfg.model,
        "model_bytes": cfg.model_bytes, "preset": cfg.preset, "loss_rate": cfg.loss_rate,
        "link_seed": cfg.link_seed(device_id), "chunk_size": cfg.chunk_size,
        "train_samples": cfg.train_samples, "timeout": cfg.timeout,
        "ports": dict(cfg.ports.__dict__),
    }


def device_loop(network, server_host: str, session: SessionClient, welcome: dict) -> int:
    """Participate in every round announced by ``welcome``; return rounds done."""
    dev = welcome["device_id"]
    ports = Ports(**welcome["ports"])
    train = fl.generate_dataset(welcome["seed"], welcome["train_samples"], FEATURES, CLASSES, "train")
    shard = fl.partition_iid(train, welcome["devices"], welcome["seed"])[dev]
    profile = LinkProfile.from_preset(welcome["preset"], welcome["loss_rate"], welcome["link_seed"])
    endpoint = open_device(welcome["protocol"], dev, network, server_host, ports, profile,
                           welcome["chunk_size"])
    timeout = welcome["timeout"]
    try:
        session.ready()
        for rnd in range(1, welcome["rounds"] + 1):
            payload = endpoint.receive_global(rnd, timeout)
            params = decode_params(payload, expected_count=PARAM_COUNT)
            tcfg = fl.TrainConfig(seed=fl.device_train_seed(welcome["seed"], dev, rnd))
            local = fl.local_train(params, shard, tcfg)
            endpoint.send_update(rnd, encode_params(local, inflate_to=welcome["model_bytes"]))
        session.wait_shutdown(timeout)
        return welcome["rounds"]
    finally:
        endpoint.close()


def _device_thread(network, host, cfg: BenchmarkConfig, dev: int, errors: dict):
    session = SessionClient(network, (host, cfg.ports.session), cfg.effective_run_id, dev)
    try:
        welcome = session.register(cfg.timeout)
        device_loop(network, host, session, welcome)
    except Exception as exc:  # reported to the orchestrator by the dropped session
        errors[dev] = exc
        log.debug("device %d stopped: %s", dev, exc)
    finally:
        session.close()


@dataclass
class _Run:
    cfg: BenchmarkConfig
    network: object
    host: str
    clock: Clock
    links: dict
    collector: Collector
    threads: list = field(default_factory=list)
    device_errors: dict = field(default_factory=dict)


def _network_for(cfg: BenchmarkConfig):
    if cfg.network == "memory":
        return MemoryNetwork("mem"), "mem"
    host = cfg.topology.server_host if cfg.topology is not None else "127.0.0.1"
    return SocketNetwork(host), host


def run_benchmark(cfg: BenchmarkConfig, out: str | None = None) -> RunReport:
    """Execute one FL run and return its report; writes it when ``out``/``cfg.out`` is set.

    Raises :class:`RunFailed` naming phase, round and device on any
    transport or timeout error.
    """
    t_setup = time.monotonic()
    network, host = _network_for(cfg)
    clock = Clock(cfg.clock)
    links = {d: Link(cfg.link_profile(d)) for d in cfg.device_ids}
    collector = Collector(cfg.device_ids, cfg.rounds)
    run = _Run(cfg, network, host, clock, links, collector)
    factor = cfg.cpu_time_factor if cfg.stress.mode == "cpu" else 1.0
    accounting = Accounting(clock, links, collector.record, factor)

    test = fl.generate_dataset(cfg.seed, cfg.test_samples, FEATURES, CLASSES, "test")
    sizes = fl.shard_sizes(cfg.train_samples, cfg.devices)
    params = fl.init_params(cfg.seed)
    initial_accuracy = fl.evaluate(params, test)

    server = session = cpu = net = None
    accuracies, losses = [], []
    cpu_ops = None
    try:
        server = open_server(cfg.protocol, network, host, cfg.ports, accounting, cfg.device_ids,
                             cfg.chunk_size)
        session = SessionServer(network, (host, cfg.ports.session), cfg.effective_run_id,
                                cfg.device_ids, lambda d: welcome_doc(cfg, d),
                                on_lost=server._device_lost)
        if not cfg.distributed:
            for d in cfg.device_ids:
                t = threading.Thread(target=_device_thread, daemon=True, name=f"device-{d}",
                                     args=(network, host, cfg, d, run.device_errors))
                t.start()
                run.threads.append(t)
        session.wait_registered(cfg.timeout)
        session.wait_ready(cfg.timeout)
        server.wait_ready(cfg.timeout)
        setup_time = time.monotonic() - t_setup

        if cfg.stress.mode == "cpu":
            cpu = CpuStress(cfg.stress).start()
        elif cfg.stress.mode == "net":
            net = NetStress(cfg.stress, links.values(), clock).start()
        payload_size = cfg.model_bytes
        for rnd in range(1, cfg.rounds + 1):
            server.broadcast_global(rnd, encode_params(params, inflate_to=payload_size))
            updates = server.collect_updates(rnd, timeout=cfg.timeout)
            params = fl.fedavg([
                fl.ClientUpdate(dev, rnd, decode_params(body, expected_count=PARAM_COUNT), sizes[dev])
                for dev, body, _missing in updates])
            accuracies.append(fl.evaluate(params, test))
            losses.append(fl.mean_loss(params, test))
    except TransportError as exc:
        raise RunFailed(f"{cfg.protocol} run aborted: {exc}", exc) from exc
    finally:
        if cpu is not None:
            cpu_ops = cpu.stop()
        if net is not None:
            net.stop()
        if session is not None:
            session.shutdown()
        for t in run.threads:
            t.join(5.0)
        if session is not None:
            session.close()
        if server is not None:
            server.close()

    report = collector.finalize(
        accuracies, initial_accuracy, losses, cfg.echo(), cfg.clock,
        hashlib.sha256(np.asarray(params, dtype=">f4").tobytes()).hexdigest())
    report.meta = {
        "version": __version__, "timestamp": utc_timestamp(), "setup_time_s": setup_time,
        "kernel_backend": kernels.BACKEND,
    }
    if cpu_ops is not None:
        report.meta["cpu_stress_ops_per_s"] = cpu_ops
    path = out or cfg.out
    if path:
        write_report(report, path)
    return report


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepResult:
    reports: list
    failed: list
    rows: int
    csv_path: str | None
    ranking: list


def sweep_cells(base: BenchmarkConfig, protocols, presets, losses, stresses=None):
    """Cross product of the matrix axes, in a fixed order."""
    stresses = stresses or [base.stress]
    for proto, preset, loss, stress in itertools.product(protocols, presets, losses, stresses):
        yield base.with_(protocol=proto, preset=preset, loss_pct=float(loss), stress=stress, out=None)


def ranking_table(reports) -> list[tuple[str, float]]:
    cells = [(_cell_label(r.config), r.totals["comm_time_s"]) for r in reports]
    return sorted(cells, key=lambda c: (c[1], c[0]))


def _cell_label(c: dict) -> str:
    return f"{c['protocol']}/{c['preset']}/loss={c['loss_pct']:g}/stress={c['stress']}"


def run_sweep(cells, csv_path: str | None = None, stream=None) -> SweepResult:
    """Run ``cells`` sequentially; failures become ``failed`` CSV rows."""
    stream = stream if stream is not None else sys.stdout
    cells = list(cells)
    if not cells:
        raise ValueError("sweep matrix is empty")
    reports, failed = [], []
    for cfg in cells:
        try:
            reports.append(run_benchmark(cfg))
        except (RunFailed, RegistrationError, OSError) as exc:
            log.error("sweep cell %s failed: %s", _cell_label(cfg.echo()), exc)
            failed.append(cfg.echo())
    rows = export_plot_csv(reports, csv_path, failed) if csv_path else 0
    ranking = ranking_table(reports)
    if stream:
        print(f"{'rank':>4}  {'total comm time (s)':>20}  cell", file=stream)
        for i, (label, total) in enumerate(ranking, 1):
            print(f"{i:>4}  {total:>20.4f}  {label}", file=stream)
        for c in failed:
            print(f"{'-':>4}  {'failed':>20}  {_cell_label(c)}", file=stream)
    return SweepResult(reports, failed, rows, csv_path, ranking)


# -- distributed agents -----------------------------------------------------

def device_agent(server_host: str, run_id: str, device_id: int, session_port: int = Ports.session,
                 bind_host: str = "127.0.0.1", timeout: float = 60.0) -> int:
    """Entry point of a distributed device process; returns rounds completed."""
    network = SocketNetwork(bind_host)
    session = SessionClient(network, (server_host, session_port), run_id, device_id)
    try:
        welcome = session.register(timeout)
        return device_loop(network, server_host, session, welcome)
    finally:
        session.close()
