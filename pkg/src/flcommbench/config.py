"""Benchmark configuration: defaults, JSON config files, CLI flag parsing."""

from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass, field, replace

from . import kernels
from .codec import DEFAULT_CHUNK_SIZE, MODEL_PRESETS
from .netem import PRESETS_BPS, LinkProfile
from .stressors import MODES as STRESS_MODES
from .stressors import StressSpec
from .transports.base import DEFAULT_TIMEOUT, Ports, TransportKind

CLOCKS = ("virtual", "wall")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceAddress:
    id: int
    address: str = ""


@dataclass(frozen=True)
class Topology:
    mode: str = "in-process"
    server: str = "mem"
    devices: tuple[DeviceAddress, ...] = ()

    def __post_init__(self):
        if self.mode not in ("in-process", "distributed"):
            raise ConfigError(f"topology mode must be in-process or distributed, got {self.mode!r}")
        ids = [d.id for d in self.devices]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError(f"topology device ids must be unique and dense from 0, got {ids}")
        if self.mode == "distributed" and not self.devices:
            raise ConfigError("distributed topology needs at least one device")

    @property
    def distributed(self) -> bool:
        return self.mode == "distributed"

    @property
    def server_host(self) -> str:
        return self.server.rsplit(":", 1)[0] if ":" in self.server else self.server

    @classmethod
    def in_process(cls, n: int) -> "Topology":
        return cls("in-process", "mem", tuple(DeviceAddress(i) for i in range(n)))

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        try:
            devices = tuple(DeviceAddress(int(d["id"]), str(d.get("address", "")))
                            for d in doc["devices"])
            return cls(doc.get("mode", "distributed"), str(doc["server"]), devices)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"--topology: malformed topology ({exc}); expected "
                              '{"server": HOST, "devices": [{"id": 0, "address": HOST}, ...]}') from None

    @classmethod
    def load(cls, path: str) -> "Topology":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"--topology: cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--topology: {path} is not valid JSON: {exc}") from None


@dataclass(frozen=True)
class BenchmarkConfig:
    protocol: TransportKind = TransportKind.TCP
    model: str = "vgg8"
    rounds: int = 5
    stress: StressSpec = field(default_factory=StressSpec)
    preset: str = "unlimited"
    loss_pct: float = 0.0
    devices: int = 4
    topology: Topology | None = None
    seed: int = 0
    clock: str = "virtual"
    out: str | None = None
    run_id: str | None = None
    network: str = "memory"
    ports: Ports = field(default_factory=Ports)
    chunk_size: int = DEFAULT_CHUNK_SIZE
    timeout: float = DEFAULT_TIMEOUT
    cpu_time_factor: float = 1.0
    train_samples: int = 4000
    test_samples: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "protocol", TransportKind.parse(self.protocol))
        if self.model not in MODEL_PRESETS:
            raise ConfigError(f"--model: unknown preset {self.model!r}; valid: {{{','.join(MODEL_PRESETS)}}}")
        if self.preset not in PRESETS_BPS:
            raise ConfigError(f"--preset: unknown preset {self.preset!r}; valid: {{{','.join(PRESETS_BPS)}}}")
        if self.clock not in CLOCKS:
            raise ConfigError(f"--clock: must be one of {{{','.join(CLOCKS)}}}, got {self.clock!r}")
        if not 0.0 <= self.loss_pct <= 100.0:
            raise ConfigError(f"--loss: must be within [0, 100], got {self.loss_pct}")
        if self.rounds < 0 or self.rounds > 0xFFFF:
            raise ConfigError(f"--rounds: must be within [0, 65535], got {self.rounds}")
        if self.devices < 1:
            raise ConfigError(f"--devices: must be >= 1, got {self.devices}")
        if self.topology is not None and len(self.topology.devices) != self.devices:
            raise ConfigError("--devices conflicts with --topology device list")
        if self.network not in ("memory", "socket"):
            raise ConfigError(f"network must be memory or socket, got {self.network!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"--seed: must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def loss_rate(self) -> float:
        return self.loss_pct / 100.0

    @property
    def device_ids(self) -> list[int]:
        return list(range(self.devices))

    @property
    def distributed(self) -> bool:
        return self.topology is not None and self.topology.distributed

    @property
    def effective_run_id(self) -> str:
        return self.run_id or f"flcomm-{self.seed}"

    @property
    def model_bytes(self) -> int:
        return MODEL_PRESETS[self.model]

    def link_seed(self, device_id: int) -> int:
        return kernels.derive_state(self.seed, kernels.stream_key("link", device_id))

    def link_profile(self, device_id: int) -> LinkProfile:
        return LinkProfile.from_preset(self.preset, self.loss_rate, self.link_seed(device_id))

    def echo(self) -> dict:
        """Configuration fields copied into the report's data section."""
        return {
            "protocol": self.protocol.value, "model": self.model, "rounds": self.rounds,
            "stress": self.stress.mode, "cpu_util": self.stress.cpu_utilization,
            "net_offered_bps": self.stress.net_offered_bps, "preset": self.preset,
            "bandwidth_bps": PRESETS_BPS[self.preset], "loss_pct": self.loss_pct,
            "devices": self.devices, "seed": self.seed, "clock": self.clock,
            "chunk_size": self.chunk_size, "cpu_time_factor": self.cpu_time_factor,
            "train_samples": self.train_samples, "test_samples": self.test_samples,
            "mode": "distributed" if self.distributed else "in-process",
        }

    def with_(self, **changes) -> "BenchmarkConfig":
        return replace(self, **changes)


# -- parsing ------------------------------------------------------------------

_FILE_KEYS = {
    "protocol", "model", "rounds", "stress", "cpu_util", "cpu_workers", "net_offered_mbps",
    "preset", "loss", "devices", "topology", "seed", "clock", "out", "run_id",
    "chunk_size", "timeout", "cpu_time_factor",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", help="tcp|udp|mqtt|amqp|zmtp (default tcp)")
    p.add_argument("--model", help="tiny|vgg5|vgg8 payload preset (default vgg8)")
    p.add_argument("--rounds", type=int, help="FL rounds (default 5)")
    p.add_argument("--stress", help="none|cpu|net (default none)")
    p.add_argument("--cpu-util", type=float, dest="cpu_util", help="CPU stress utilisation in (0,1]")
    p.add_argument("--cpu-workers", type=int, dest="cpu_workers", help="CPU stress processes")
    p.add_argument("--net-offered-mbps", type=float, dest="net_offered_mbps",
                   help="network stress offered load in Mbit/s (default 250)")
    p.add_argument("--preset", help="3g|4g|wifi|unlimited (default unlimited)")
    p.add_argument("--loss", type=float, help="packet loss percentage in [0, 100]")
    p.add_argument("--devices", type=int, help="number of in-process devices (default 4)")
    p.add_argument("--topology", help="JSON topology file for distributed mode")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--clock", help="virtual|wall (default virtual)")
    p.add_argument("--out", help="report output path")
    p.add_argument("--run-id", dest="run_id", help="identifier agents must present")
    p.add_argument("--chunk-size", type=int, dest="chunk_size", help="UDP chunk payload bytes")
    p.add_argument("--timeout", type=float, help="per-phase liveness timeout in seconds")
    p.add_argument("--cpu-time-factor", type=float, dest="cpu_time_factor",
                   help="virtual-clock serialisation slowdown under CPU stress (1.0 = off)")
    p.add_argument("--config", help="JSON config file; flags override its values")


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"--config: {path} must contain a JSON object")
    out = {}
    for key, value in doc.items():
        norm = key.replace("-", "_")
        if norm not in _FILE_KEYS:
            raise ConfigError(f"--config: unknown key {key!r}; valid keys: {', '.join(sorted(_FILE_KEYS))}")
        out[norm] = value
    return out


def _choice(flag, value, valid):
    if value not in valid:
        raise ConfigError(f"{flag}: unknown value {value!r}; valid: {{{','.join(valid)}}}")
    return value


def build_config(values: dict, explicit: set | None = None) -> BenchmarkConfig:
    """Turn merged flag/file values into a config, checking flag conflicts."""
    explicit = set(values) if explicit is None else explicit
    stress_mode = _choice("--stress", values.get("stress", "none"), STRESS_MODES)
    if "cpu_util" in explicit and stress_mode != "cpu":
        raise ConfigError("--cpu-util conflicts with --stress "
                          f"{stress_mode}; it requires --stress cpu")
    if "net_offered_mbps" in explicit and stress_mode != "net":
        raise ConfigError("--net-offered-mbps conflicts with --stress "
                          f"{stress_mode}; it requires --stress net")
    if "topology" in values and values.get("topology") and "devices" in explicit:
        topo = Topology.load(values["topology"]) if isinstance(values["topology"], str) \
            else Topology.from_dict(values["topology"])
        if len(topo.devices) != int(values["devices"]):
            raise ConfigError(f"--devices {values['devices']} conflicts with --topology "
                              f"listing {len(topo.devices)} devices")
    try:
        stress = StressSpec(stress_mode, float(values.get("cpu_util", 0.99)),
                            values.get("cpu_workers"),
                            float(values.get("net_offered_mbps", 250.0)) * 1e6)
    except ValueError as exc:
        flag = "--cpu-util" if "utilization" in str(exc) else "--net-offered-mbps"
        raise ConfigError(f"{flag}: {exc}") from None
    protocol = values.get("protocol", "tcp")
    try:
        protocol = TransportKind.parse(protocol)
    except ValueError as exc:
        raise ConfigError(f"--protocol: {exc}") from None
    topology = None
    if values.get("topology"):
        t = values["topology"]
        topology = Topology.load(t) if isinstance(t, str) else Topology.from_dict(t)
    kw = {}
    for key in ("model", "preset", "clock", "out", "run_id"):
        if values.get(key) is not None:
            kw[key] = values[key]
    for key, conv in (("rounds", int), ("seed", int), ("chunk_size", int),
                      ("timeout", float), ("cpu_time_factor", float)):
        if values.get(key) is not None:
            kw[key] = conv(values[key])
    if values.get("loss") is not None:
        kw["loss_pct"] = float(values["loss"])
    devices = values.get("devices")
    if topology is not None:
        devices = len(topology.devices)
    if devices is not None:
        kw["devices"] = int(devices)
    if topology is not None and topology.distributed:
        kw["network"] = "socket"
    return BenchmarkConfig(protocol=protocol, stress=stress, topology=topology, **kw)


def parse_config(argv=None, config_file: str | None = None) -> BenchmarkConfig:
    """Parse ``run`` flags (optionally on top of a JSON config file)."""
    p = _Parser(prog="flcommbench run", add_help=False)
    add_run_flags(p)
    ns = p.parse_args(list(argv or []))
    return config_from_namespace(ns, config_file)


def config_from_namespace(ns, config_file: str | None = None) -> BenchmarkConfig:
    flags = {k: v for k, v in vars(ns).items() if v is not None and k in _FILE_KEYS}
    path = config_file or getattr(ns, "config", None)
    values = load_config_file(path) if path else {}
    values.update(flags)
    return build_config(values, explicit=set(flags))


def config_dict(cfg: BenchmarkConfig) -> dict:
    return asdict(cfg)
