"""Host CPU load and synthetic link contention.

CPU stress runs in separate processes so the load is real CPU time rather
than GIL contention. Network stress registers background flows on every
device link, in both directions.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import time
from dataclasses import dataclass

from .netem import background_flow

MODES = ("none", "cpu", "net")
WINDOW_S = 0.1
MATRIX_SIZE = 64


class StressError(RuntimeError):
    pass


@dataclass(frozen=True)
class StressSpec:
    mode: str = "none"
    cpu_utilization: float = 0.99
    cpu_workers: int | None = None
    net_offered_bps: float = 250_000_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown stress mode {self.mode!r}; valid modes: {{{','.join(MODES)}}}")
        if not 0.0 < self.cpu_utilization <= 1.0:
            raise ValueError(f"cpu utilization must be in (0, 1], got {self.cpu_utilization}")
        if self.cpu_workers is not None and self.cpu_workers < 1:
            raise ValueError(f"cpu_workers must be >= 1, got {self.cpu_workers}")
        if self.net_offered_bps < 0:
            raise ValueError(f"net offered load must be non-negative, got {self.net_offered_bps}")

    @property
    def workers(self) -> int:
        return self.cpu_workers or os.cpu_count() or 1


def _cpu_worker(index, utilization, stop, ops, active):
    import numpy as np

    a = np.random.default_rng(index).standard_normal((MATRIX_SIZE, MATRIX_SIZE)).astype(np.float32)
    b = a.copy()
    t_start = time.perf_counter()
    while not stop.is_set():
        t0 = time.perf_counter()
        busy_until = t0 + utilization * WINDOW_S
        n = 0
        while time.perf_counter() < busy_until:
            np.matmul(a, b, out=b)
            b *= 0.01
            n += 1
        with ops.get_lock():
            ops.value += n
        active.value = time.perf_counter() - t_start
        rest = t0 + WINDOW_S - time.perf_counter()
        if rest > 0:
            stop.wait(rest)
    active.value = time.perf_counter() - t_start


class CpuStress:
    """Duty-cycled 64x64 float32 matmul loops, one process per worker."""

    def __init__(self, spec: StressSpec):
        if spec.mode != "cpu":
            raise StressError(f"CPU stress needs mode 'cpu', got {spec.mode!r}")
        self.spec = spec
        self._procs: list = []
        self._counters: list = []
        self._stop = None
        self.state = "idle"

    def start(self) -> "CpuStress":
        if self.state != "idle":
            raise StressError(f"CPU stress already {self.state}")
        ctx = mp.get_context("spawn")
        self._stop = ctx.Event()
        saved = os.environ.get("OPENBLAS_NUM_THREADS")
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        try:
            for i in range(self.spec.workers):
                ops, active = ctx.Value("q", 0), ctx.Value("d", 0.0)
                p = ctx.Process(target=_cpu_worker, daemon=True, name=f"cpu-stress-{i}",
                                args=(i, self.spec.cpu_utilization, self._stop, ops, active))
                p.start()
                self._procs.append(p)
                self._counters.append((ops, active))
        finally:
            if saved is None:
                os.environ.pop("OPENBLAS_NUM_THREADS", None)
            else:
                os.environ["OPENBLAS_NUM_THREADS"] = saved
        self.state = "running"
        return self

    def stop(self) -> float:
        """Stop the workers; return achieved matmuls per second (all workers)."""
        if self.state != "running":
            raise StressError(f"cannot stop CPU stress that is {self.state}")
        self._stop.set()
        for p in self._procs:
            p.join(5.0)
            if p.is_alive():
                p.terminate()
        self.state = "stopped"
        return sum(ops.value / active.value for ops, active in self._counters if active.value > 0)


class NetStress:
    def __init__(self, spec: StressSpec, links, clock):
        if spec.mode != "net":
            raise StressError(f"network stress needs mode 'net', got {spec.mode!r}")
        self.spec = spec
        self.links = list(links)
        self.clock = clock
        self.flows: list = []
        self.state = "idle"

    def start(self) -> "NetStress":
        if self.state != "idle":
            raise StressError(f"network stress already {self.state}")
        self.flows = [background_flow(link, self.spec.net_offered_bps, None, self.clock)
                      for link in self.links]
        self.state = "running"
        return self

    def stop(self) -> None:
        if self.state != "running":
            raise StressError(f"cannot stop network stress that is {self.state}")
        for f in self.flows:
            f.stop()
        self.state = "stopped"


def cpu_stress_start(spec: StressSpec) -> CpuStress:
    return CpuStress(spec).start()


def cpu_stress_stop(handle: CpuStress) -> float:
    return handle.stop()


def net_stress_start(spec: StressSpec, links, clock) -> NetStress:
    return NetStress(spec, links, clock).start()


def net_stress_stop(handle: NetStress) -> None:
    handle.stop()
