"""Transfer events, per-round aggregation, JSON reports and plot CSV export.

A report file has three top-level keys: ``schema``, ``meta`` (version,
timestamps, setup time: everything allowed to differ between identical
runs) and ``data`` (deterministic in virtual-clock mode). Field reference:
``docs/report-schema.md``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import threading
from dataclasses import asdict, dataclass, field

SCHEMA = "fedcomm-report/v1"
CSV_COLUMNS = ["protocol", "preset", "loss_pct", "stress", "model", "round",
               "comm_time_s", "accuracy", "retransmissions", "status"]


class DuplicateTransfer(ValueError):
    pass


class CollectorClosed(RuntimeError):
    pass


class IncompleteRunError(RuntimeError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(f"(device {d}, round {r}, {dr})" for d, r, dr in self.missing[:8])
        more = f" and {len(self.missing) - 8} more" if len(self.missing) > 8 else ""
        super().__init__(f"incomplete run: missing transfers {shown}{more}")


@dataclass(frozen=True)
class CommEvent:
    device_id: int
    round: int
    direction: str
    bytes: int
    start: float
    end: float
    retransmissions: int = 0
    missing_chunks: int = 0

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")
        if self.end < self.start:
            raise ValueError(f"event ends before it starts ({self.end} < {self.start})")
        if self.bytes < 0 or self.retransmissions < 0 or self.missing_chunks < 0:
            raise ValueError("bytes, retransmissions and missing_chunks must be non-negative")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class RoundMetrics:
    round: int
    comm_time_s: float
    broadcast_time_s: float
    upload_time_s: float
    bytes_down: int
    bytes_up: int
    retransmissions_down: int
    retransmissions_up: int
    retransmissions: int
    missing_chunks: int
    accuracy: float
    loss: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.comm_time_s < 0:
            raise ValueError("comm_time_s must be non-negative")


_TOTAL_FIELDS = ("comm_time_s", "broadcast_time_s", "upload_time_s", "bytes_down", "bytes_up",
                 "retransmissions_down", "retransmissions_up", "retransmissions", "missing_chunks")


@dataclass
class RunReport:
    config: dict
    rounds: list[RoundMetrics]
    initial_accuracy: float
    clock: str = "virtual"
    status: str = "complete"
    missing: list = field(default_factory=list)
    model_sha256: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def totals(self) -> dict:
        out = {k: sum(getattr(r, k) for r in self.rounds) for k in _TOTAL_FIELDS}
        out["final_accuracy"] = self.rounds[-1].accuracy if self.rounds else self.initial_accuracy
        return out

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    def data(self) -> dict:
        return {
            "config": self.config,
            "clock": self.clock,
            "status": self.status,
            "missing": [list(m) for m in self.missing],
            "initial_accuracy": self.initial_accuracy,
            "rounds": [asdict(r) for r in self.rounds],
            "totals": self.totals,
            "model_sha256": self.model_sha256,
        }

    def data_json(self) -> str:
        return json.dumps(self.data(), sort_keys=True, indent=2)

    def to_json(self) -> str:
        doc = {"schema": SCHEMA, "meta": self.meta, "data": self.data()}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}, expected {SCHEMA}")
        d = doc["data"]
        report = cls(
            config=d["config"],
            rounds=[RoundMetrics(**r) for r in d["rounds"]],
            initial_accuracy=d["initial_accuracy"],
            clock=d["clock"],
            status=d["status"],
            missing=[tuple(m) for m in d["missing"]],
            model_sha256=d["model_sha256"],
            meta=doc.get("meta", {}),
        )
        if report.complete and report.totals != d["totals"]:
            raise ValueError("report totals do not match the per-round sums")
        return report


class Collector:
    """Thread-safe event sink for one run."""

    def __init__(self, device_ids, rounds: int):
        self.device_ids = sorted(device_ids)
        self.rounds = rounds
        self._events: dict[tuple[int, int, str], CommEvent] = {}
        self._lock = threading.Lock()
        self._closed = False

    def record(self, event: CommEvent) -> None:
        key = (event.device_id, event.round, event.direction)
        with self._lock:
            if self._closed:
                raise CollectorClosed("collector is closed")
            if key in self._events:
                raise DuplicateTransfer(
                    f"duplicate {event.direction} transfer for device {event.device_id} "
                    f"round {event.round}")
            self._events[key] = event

    def close(self) -> None:
        with self._lock:
            self._closed = True

    @property
    def events(self) -> list[CommEvent]:
        with self._lock:
            return sorted(self._events.values(), key=lambda e: (e.round, e.direction, e.device_id))

    def missing(self, through_round: int | None = None) -> list[tuple[int, int, str]]:
        last = self.rounds if through_round is None else through_round
        return [(d, r, dr) for r in range(1, last + 1) for dr in ("down", "up")
                for d in self.device_ids if (d, r, dr) not in self._events]

    def finalize(self, accuracies, initial_accuracy: float, losses=None, config=None,
                 clock: str = "virtual", model_sha256: str = "", allow_incomplete=False) -> RunReport:
        self.close()
        missing = self.missing()
        if missing and not allow_incomplete:
            raise IncompleteRunError(missing)
        losses = list(losses) if losses is not None else [None] * len(accuracies)
        rounds = []
        for r in range(1, len(accuracies) + 1):
            rounds.append(_round_metrics(self._events, self.device_ids, r, accuracies[r - 1],
                                         losses[r - 1]))
        return RunReport(dict(config or {}), rounds, initial_accuracy, clock,
                         "incomplete" if missing else "complete", missing, model_sha256)


def phase_span(events) -> float:
    events = list(events)
    if not events:
        return 0.0
    return max(e.end for e in events) - min(e.start for e in events)


def _round_metrics(events, device_ids, r, accuracy, loss) -> RoundMetrics:
    down = [events[(d, r, "down")] for d in device_ids if (d, r, "down") in events]
    up = [events[(d, r, "up")] for d in device_ids if (d, r, "up") in events]
    b, u = phase_span(down), phase_span(up)
    rd = sum(e.retransmissions for e in down)
    ru = sum(e.retransmissions for e in up)
    return RoundMetrics(
        round=r, comm_time_s=b + u, broadcast_time_s=b, upload_time_s=u,
        bytes_down=sum(e.bytes for e in down), bytes_up=sum(e.bytes for e in up),
        retransmissions_down=rd, retransmissions_up=ru, retransmissions=rd + ru,
        missing_chunks=sum(e.missing_chunks for e in down + up),
        accuracy=accuracy, loss=loss)


def utc_timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_report(report: RunReport, path) -> None:
    if not report.complete:
        raise IncompleteRunError(report.missing)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def read_report(path) -> RunReport:
    try:
        with open(path, encoding="utf-8") as fh:
            return RunReport.from_json(fh.read())
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc.strerror or exc}") from exc


def csv_rows(report: RunReport) -> list[dict]:
    c = report.config
    base = {"protocol": c.get("protocol"), "preset": c.get("preset"),
            "loss_pct": c.get("loss_pct"), "stress": c.get("stress"), "model": c.get("model")}
    return [dict(base, round=r.round, comm_time_s=r.comm_time_s, accuracy=r.accuracy,
                 retransmissions=r.retransmissions, status=report.status)
            for r in report.rounds]


def export_plot_csv(reports, path, failed=()) -> int:
    """One row per (run, round); ``failed`` holds config dicts of failed cells.

    Returns the number of data rows written.
    """
    rows = [row for rep in reports for row in csv_rows(rep)]
    for cfg in failed:
        rows.append({"protocol": cfg.get("protocol"), "preset": cfg.get("preset"),
                     "loss_pct": cfg.get("loss_pct"), "stress": cfg.get("stress"),
                     "model": cfg.get("model"), "round": "", "comm_time_s": "",
                     "accuracy": "", "retransmissions": "", "status": "failed"})
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc
    return len(rows)
