"""``flcommbench`` command line: ``run``, ``sweep`` and ``agent`` subcommands."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, add_run_flags, config_from_namespace
from .metrics import IncompleteRunError
from .stressors import StressSpec
from .transports import Ports, TransportKind
from .transports.session import RegistrationError

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _list(flag, text, valid=None):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError(f"{flag}: expected a comma-separated list")
    if valid is not None:
        bad = [i for i in items if i not in valid]
        if bad:
            raise ConfigError(f"{flag}: unknown value {bad[0]!r}; valid: {{{','.join(valid)}}}")
    return items


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flcommbench",
                                description="Federated learning communication benchmark")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one benchmark run")
    add_run_flags(run)

    sweep = sub.add_parser("sweep", help="run a protocol x preset x loss x stress matrix")
    add_run_flags(sweep)
    sweep.add_argument("--protocols", default="tcp,udp,mqtt,amqp,zmtp")
    sweep.add_argument("--presets", default="3g,4g,wifi")
    sweep.add_argument("--losses", default="0")
    sweep.add_argument("--stresses", default=None, help="comma list of none|cpu|net")
    sweep.add_argument("--csv", default="sweep.csv", help="plot CSV output path")

    agent = sub.add_parser("agent", help="distributed-mode device process")
    agent.add_argument("--server", required=True, help="server host")
    agent.add_argument("--run-id", required=True, dest="run_id")
    agent.add_argument("--device-id", required=True, type=int, dest="device_id")
    agent.add_argument("--session-port", type=int, default=Ports.session, dest="session_port")
    agent.add_argument("--bind", default="127.0.0.1", help="local address for datagram sockets")
    agent.add_argument("--timeout", type=float, default=60.0)
    return p


def _print_summary(report, out=None):
    out = out or sys.stdout
    t = report.totals
    print(f"{report.config['protocol']} {report.config['preset']} loss={report.config['loss_pct']:g}% "
          f"rounds={len(report.rounds)}", file=out)
    for r in report.rounds:
        print(f"  round {r.round}: comm {r.comm_time_s:.4f}s  acc {r.accuracy:.4f}  "
              f"retx {r.retransmissions}", file=out)
    print(f"  total comm time {t['comm_time_s']:.4f}s  final accuracy {t['final_accuracy']:.4f}",
          file=out)


def _cmd_run(ns) -> int:
    from .runner import run_benchmark

    cfg = config_from_namespace(ns)
    report = run_benchmark(cfg)
    _print_summary(report)
    if cfg.out:
        print(f"report written to {cfg.out}")
    return EXIT_OK


def _cmd_sweep(ns) -> int:
    from .runner import run_sweep, sweep_cells

    base = config_from_namespace(ns)
    protocols = _list("--protocols", ns.protocols, [k.value for k in TransportKind])
    presets = _list("--presets", ns.presets, ["3g", "4g", "wifi", "unlimited"])
    try:
        losses = [float(x) for x in _list("--losses", ns.losses)]
    except ValueError:
        raise ConfigError(f"--losses: expected numbers in [0, 100], got {ns.losses!r}") from None
    stresses = None
    if ns.stresses:
        stresses = [StressSpec(m, base.stress.cpu_utilization, base.stress.cpu_workers,
                               base.stress.net_offered_bps)
                    for m in _list("--stresses", ns.stresses, ["none", "cpu", "net"])]
    result = run_sweep(list(sweep_cells(base, protocols, presets, losses, stresses)), ns.csv)
    print(f"{result.rows} CSV rows written to {ns.csv}")
    return EXIT_FAILED if result.failed else EXIT_OK


def _cmd_agent(ns) -> int:
    from .runner import device_agent

    rounds = device_agent(ns.server, ns.run_id, ns.device_id, ns.session_port, ns.bind, ns.timeout)
    print(f"device {ns.device_id}: completed {rounds} rounds")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .runner import RunFailed

    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "agent": _cmd_agent}
    try:
        return handlers[ns.command](ns)
    except ConfigError as exc:
        print(f"flcommbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailed, IncompleteRunError, RegistrationError, OSError) as exc:
        print(f"flcommbench: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
