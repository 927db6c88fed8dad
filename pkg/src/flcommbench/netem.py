"""Userspace link emulation: token-bucket shaping, seeded loss, RTO retransmission.

Every emulated delay is charged against a :class:`Clock`. In virtual mode the
clock is a logical counter, so whole benchmark runs finish in milliseconds and
are reproducible; wall mode realises the same delays as real sleeps.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

from . import kernels

PRESETS_BPS = {
    "3g": 5_000_000,
    "4g": 20_000_000,
    "wifi": 60_000_000,
    "unlimited": None,
}

DEFAULT_BURST_BYTES = 64 * 1024


@dataclass(frozen=True)
class LinkProfile:
    """Bandwidth/loss description of one emulated device<->server path.

    ``bandwidth_bps`` of ``None`` means unshaped. The rate applies to each
    direction independently.
    """

    bandwidth_bps: int | None = None
    loss_rate: float = 0.0
    base_latency_ms: float = 0.0
    seed: int = 0
    preset: str = "unlimited"

    def __post_init__(self):
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError(f"bandwidth_bps must be positive or None, got {self.bandwidth_bps}")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate must be within [0, 1], got {self.loss_rate}")
        if self.base_latency_ms < 0:
            raise ValueError(f"base_latency_ms must be non-negative, got {self.base_latency_ms}")

    @classmethod
    def from_preset(cls, preset: str, loss_rate: float = 0.0, seed: int = 0,
                    base_latency_ms: float = 0.0) -> "LinkProfile":
        try:
            bps = PRESETS_BPS[preset]
        except KeyError:
            valid = ", ".join(PRESETS_BPS)
            raise ValueError(f"unknown link preset {preset!r}; valid presets: {valid}") from None
        return cls(bps, loss_rate, base_latency_ms, seed, preset)

    @property
    def unlimited(self) -> bool:
        return self.bandwidth_bps is None


@dataclass(frozen=True)
class RetxModel:
    segment_size: int = 1448
    initial_rto_ms: float = 200.0
    backoff_factor: float = 2.0
    rto_cap_ms: float = 3000.0

    def __post_init__(self):
        if self.segment_size <= 0:
            raise ValueError("segment_size must be positive")
        if self.rto_cap_ms < self.initial_rto_ms:
            raise ValueError("rto_cap_ms must be >= initial_rto_ms")


class Clock:
    """Single authority for emulated time.

    ``virtual`` mode advances only through :meth:`advance`/:meth:`advance_to`
    and never sleeps. ``wall`` mode reports seconds since construction and
    sleeps on advance. Concurrent activities are modelled with
    :meth:`branch` timelines merged by :meth:`join` (max, not sum).
    """

    def __init__(self, mode: str = "virtual"):
        if mode not in ("virtual", "wall"):
            raise ValueError(f"clock mode must be 'virtual' or 'wall', got {mode!r}")
        self.mode = mode
        self._lock = threading.Lock()
        self._now = 0.0
        self._origin = time.monotonic()

    @property
    def virtual(self) -> bool:
        return self.mode == "virtual"

    def now(self) -> float:
        if self.virtual:
            with self._lock:
                return self._now
        return time.monotonic() - self._origin

    def advance(self, delay: float) -> float:
        if delay < 0:
            raise ValueError(f"cannot advance clock by negative delay {delay}")
        if self.virtual:
            with self._lock:
                self._now += delay
                return self._now
        time.sleep(delay)
        return self.now()

    def advance_to(self, t: float) -> float:
        if self.virtual:
            with self._lock:
                if t > self._now:
                    self._now = t
                return self._now
        remaining = t - self.now()
        if remaining > 0:
            time.sleep(remaining)
        return self.now()

    def branch(self) -> "Timeline":
        return Timeline(self, self.now())

    def join(self, *timelines: "Timeline") -> float:
        if not timelines:
            return self.now()
        return self.advance_to(max(tl.now for tl in timelines))


class Timeline:
    """A cursor forked from a clock; one per concurrent activity."""

    def __init__(self, clock: Clock, start: float):
        self.clock = clock
        self.start = start
        self.now = start

    def advance(self, delay: float) -> float:
        if delay < 0:
            raise ValueError(f"cannot advance timeline by negative delay {delay}")
        self.now += delay
        if not self.clock.virtual:
            time.sleep(delay)
        return self.now


def clock_now(clock: Clock) -> float:
    return clock.now()


def clock_advance(clock: Clock, delay: float) -> float:
    return clock.advance(delay)


@dataclass
class _Contender:
    offered_Bps: float
    start: float
    stop: float = math.inf


class TokenBucket:
    """Byte-credit limiter. ``rate_bps`` of ``None`` disables shaping.

    Acquisitions are FIFO: a request stamped earlier than the bucket's last
    service time waits behind it. Background contenders registered with
    :meth:`add_contender` reduce the credit rate seen by foreground traffic.
    """

    def __init__(self, rate_bps: int | None, burst_bytes: int = DEFAULT_BURST_BYTES,
                 tokens: float = 0.0, last_refill: float | None = None):
        self.rate_bps = rate_bps
        self.burst_bytes = float(burst_bytes)
        self.tokens = min(float(tokens), self.burst_bytes)
        # None: credit starts accruing at the first acquisition
        self.last_refill = last_refill
        self.contenders: list[_Contender] = []
        self.event_log: list[tuple[float, float, float, str]] = []
        self._lock = threading.Lock()

    @property
    def unlimited(self) -> bool:
        return self.rate_bps is None

    @property
    def rate_Bps(self) -> float:
        return 0.0 if self.rate_bps is None else self.rate_bps / 8.0

    def background_Bps(self, t: float) -> float:
        return sum(c.offered_Bps for c in self.contenders if c.start <= t < c.stop)

    def effective_Bps(self, t: float) -> float:
        """Foreground credit rate at time ``t`` in bytes/s (0 means unshaped)."""
        rate = self.rate_Bps
        if rate == 0.0:
            return 0.0
        bg = self.background_Bps(t)
        if bg <= 0.0:
            return rate
        # greedy foreground offering the line rate against FIFO background
        return rate * rate / (rate + bg)

    def add_contender(self, offered_bps: float, start: float, duration: float | None = None):
        c = _Contender(offered_bps / 8.0, start, math.inf if duration is None else start + duration)
        with self._lock:
            self.contenders.append(c)
        return c

    def stop_contender(self, contender: _Contender, at: float) -> None:
        with self._lock:
            contender.stop = min(contender.stop, at)

    def acquire(self, n: int, now: float) -> float:
        """Consume ``n`` bytes of credit; return the wait from ``now``."""
        if n < 0:
            raise ValueError(f"cannot acquire negative byte count {n}")
        if self.unlimited:
            return 0.0
        with self._lock:
            if self.last_refill is None:
                self.last_refill = now
            t = now if now > self.last_refill else self.last_refill
            rate = self.effective_Bps(t)
            if t > self.last_refill:
                self.tokens = min(self.burst_bytes, self.tokens + (t - self.last_refill) * rate)
                self.last_refill = t
            if self.tokens >= n:
                self.tokens -= n
                end = t
            else:
                end = t + (n - self.tokens) / rate
                self.tokens = 0.0
                self.last_refill = end
            self._log(t, end, n)
            return end - now

    def run_segments(self, n_bytes: int, retx: RetxModel, loss_rate: float, state: int,
                     now: float) -> tuple[float, int, int, int]:
        """Segment-level reliable transfer through this bucket.

        Returns ``(end, retransmissions, wire_bytes, rng_state)``.
        """
        with self._lock:
            if self.last_refill is None:
                self.last_refill = now
            if self.unlimited:
                rate = 0.0
            else:
                start = now if now > self.last_refill else self.last_refill
                rate = self.effective_Bps(start)
            end, n_retx, wire, tokens, last, state = kernels.stream_segments(
                n_bytes, retx.segment_size, loss_rate, state,
                rate, self.burst_bytes, self.tokens, self.last_refill, now,
                retx.initial_rto_ms / 1000.0, retx.backoff_factor, retx.rto_cap_ms / 1000.0,
            )
            if not self.unlimited:
                self.tokens, self.last_refill = tokens, last
                self._log(now, end, wire)
            return end, n_retx, wire, state

    def _log(self, start: float, end: float, n: float) -> None:
        self.event_log.append((start, end, float(n), "fg"))
        bg = self.background_Bps(start)
        if bg > 0.0 and end > start:
            rate = self.rate_Bps
            share = rate * bg / (rate + bg)
            stop = min(end, min(c.stop for c in self.contenders if c.start <= start < c.stop))
            self.event_log.append((start, stop, share * (stop - start), "bg"))


def bucket_acquire(bucket: TokenBucket, n: int, now: float) -> float:
    return bucket.acquire(n, now)


def _gate_state(profile: LinkProfile, stream_id) -> int:
    key = stream_id if isinstance(stream_id, int) else kernels.stream_key(*stream_id)
    return kernels.derive_state(profile.seed, key)


def datagram_gate(profile: LinkProfile, chunk_count: int, stream_id) -> list[bool]:
    """Keep/drop decisions for ``chunk_count`` datagrams; ``True`` means kept."""
    mask, _ = kernels.drop_mask(_gate_state(profile, stream_id), chunk_count, profile.loss_rate)
    return [not b for b in mask]


@dataclass(frozen=True)
class Transfer:
    start: float
    end: float
    retransmissions: int = 0
    wire_bytes: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


def stream_transfer(profile: LinkProfile, retx: RetxModel, n_bytes: int, stream_id,
                    clock: Clock, bucket: TokenBucket | None = None) -> tuple[float, int, int]:
    """Reliable transfer of ``n_bytes`` starting at ``clock.now()``.

    Advances ``clock`` by the resulting delay and returns
    ``(delay, retransmissions, bytes_on_wire)``.
    """
    if n_bytes < 0:
        raise ValueError(f"n_bytes must be non-negative, got {n_bytes}")
    if profile.loss_rate >= 1.0:
        raise ValueError("a reliable stream cannot complete at loss_rate 1.0")
    if bucket is None:
        bucket = TokenBucket(profile.bandwidth_bps)
    start = clock.now()
    end, n_retx, wire, _ = bucket.run_segments(
        n_bytes, retx, profile.loss_rate, _gate_state(profile, stream_id), start)
    end += profile.base_latency_ms / 1000.0
    clock.advance_to(end)
    return end - start, n_retx, wire


class BackgroundFlow:
    """Handle for a synthetic contending flow on one or more buckets."""

    def __init__(self, buckets, offered_bps: float, clock: Clock, duration: float | None):
        self.clock = clock
        self.offered_bps = offered_bps
        self._entries = []
        if offered_bps > 0:
            start = clock.now()
            self._entries = [(b, b.add_contender(offered_bps, start, duration)) for b in buckets]
        self.active = bool(self._entries)

    def stop(self) -> None:
        at = self.clock.now()
        for bucket, contender in self._entries:
            bucket.stop_contender(contender, at)
        self.active = False


def background_flow(target, offered_bps: float, duration: float | None, clock: Clock) -> BackgroundFlow:
    """Contend with foreground traffic at ``offered_bps`` for ``duration`` seconds.

    ``target`` is a :class:`Link`, a :class:`TokenBucket` or an iterable of
    buckets. ``duration=None`` runs until :meth:`BackgroundFlow.stop`.
    """
    if offered_bps < 0:
        raise ValueError(f"offered_bps must be non-negative, got {offered_bps}")
    if isinstance(target, Link):
        buckets = [target.down, target.up]
    elif isinstance(target, TokenBucket):
        buckets = [target]
    else:
        buckets = list(target)
    return BackgroundFlow(buckets, offered_bps, clock, duration)


@dataclass
class Link:
    """One device<->server path: a bucket per direction plus seeded loss."""

    profile: LinkProfile
    retx: RetxModel = field(default_factory=RetxModel)
    burst_bytes: int = DEFAULT_BURST_BYTES

    def __post_init__(self):
        self.down = TokenBucket(self.profile.bandwidth_bps, self.burst_bytes)
        self.up = TokenBucket(self.profile.bandwidth_bps, self.burst_bytes)

    def bucket(self, direction: str) -> TokenBucket:
        if direction == "down":
            return self.down
        if direction == "up":
            return self.up
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")

    @property
    def _latency(self) -> float:
        return self.profile.base_latency_ms / 1000.0

    def stream(self, n_bytes: int, direction: str, start: float, stream_id) -> Transfer:
        """Lossy-but-reliable stream transfer (RTO retransmission)."""
        if self.profile.loss_rate >= 1.0:
            raise ValueError("a reliable stream cannot complete at loss_rate 1.0")
        end, n_retx, wire, _ = self.bucket(direction).run_segments(
            n_bytes, self.retx, self.profile.loss_rate, _gate_state(self.profile, stream_id), start)
        return Transfer(start, end + self._latency, n_retx, wire)

    def control(self, n_bytes: int, direction: str, start: float) -> Transfer:
        """Shaped, loss-free transfer (reliable control messages)."""
        delay = self.bucket(direction).acquire(n_bytes, start)
        return Transfer(start, start + delay + self._latency, 0, n_bytes)

    def datagrams(self, n_bytes: int, direction: str, start: float) -> Transfer:
        """Datagram burst: every datagram consumes bandwidth, lost or not."""
        delay = self.bucket(direction).acquire(n_bytes, start)
        return Transfer(start, start + delay + self._latency, 0, n_bytes)

    def gate(self, chunk_count: int, stream_id) -> list[bool]:
        return datagram_gate(self.profile, chunk_count, stream_id)
