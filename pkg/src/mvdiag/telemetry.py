"""Raw telemetry records, JSONL I/O and half-open time-window slicing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TypeVar, Union

__all__ = [
    "MetricSample",
    "Span",
    "LogEntry",
    "TimeWindow",
    "FailureRecord",
    "TelemetryBundle",
    "MalformedRecord",
    "load_telemetry",
    "save_telemetry",
    "load_labels",
    "save_labels",
    "slice_window",
    "KNOWN_LEVELS",
]

KNOWN_LEVELS = ("INFO", "WARN", "ERROR", "DEBUG")


class MalformedRecord(ValueError):
    """A JSONL line does not match the schema of the declared record kind."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True, slots=True)
class MetricSample:
    instance_id: str
    metric_name: str
    timestamp: int
    value: float

    @property
    def ts(self) -> int:
        return self.timestamp


@dataclass(frozen=True, slots=True)
class Span:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    service: str
    instance_id: str
    operation: str
    start_ts: int
    duration: int
    status_code: str

    @property
    def ts(self) -> int:
        return self.start_ts

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.duration


@dataclass(frozen=True, slots=True)
class LogEntry:
    instance_id: str
    timestamp: int
    level: str
    message: str

    @property
    def ts(self) -> int:
        return self.timestamp


@dataclass(frozen=True, slots=True)
class TimeWindow:
    start_ts: int
    end_ts: int

    def __post_init__(self):
        if not self.start_ts < self.end_ts:
            raise ValueError(f"empty window [{self.start_ts}, {self.end_ts})")

    def __contains__(self, ts: int) -> bool:
        return self.start_ts <= ts < self.end_ts


@dataclass(frozen=True, slots=True)
class FailureRecord:
    inject_ts: int
    root_cause_instance: str
    failure_type: str


Record = Union[MetricSample, Span, LogEntry]
R = TypeVar("R", MetricSample, Span, LogEntry)


@dataclass
class TelemetryBundle:
    """Metrics, spans and logs of one system snapshot."""

    metrics: list[MetricSample] = field(default_factory=list)
    spans: list[Span] = field(default_factory=list)
    logs: list[LogEntry] = field(default_factory=list)

    def window(self, w: TimeWindow) -> "TelemetryBundle":
        return TelemetryBundle(
            slice_window(self.metrics, w), slice_window(self.spans, w), slice_window(self.logs, w)
        )

    @classmethod
    def from_dir(cls, root: str | Path) -> "TelemetryBundle":
        root = Path(root)
        return cls(
            load_telemetry(root / "metrics.jsonl", "metric"),
            load_telemetry(root / "traces.jsonl", "trace"),
            load_telemetry(root / "logs.jsonl", "log"),
        )

    def to_dir(self, root: str | Path) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        save_telemetry(root / "metrics.jsonl", self.metrics)
        save_telemetry(root / "traces.jsonl", self.spans)
        save_telemetry(root / "logs.jsonl", self.logs)


def slice_window(records: Iterable[R], window: TimeWindow) -> list[R]:
    """Records with ``start_ts <= ts < end_ts``, input order preserved."""
    lo, hi = window.start_ts, window.end_ts
    return [r for r in records if lo <= r.ts < hi]


# -- JSONL schema ------------------------------------------------------------

def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _req(obj: dict, key: str, line_no: int):
    if key not in obj:
        raise MalformedRecord(line_no, f"missing field {key!r}")
    return obj[key]


def _str(obj: dict, key: str, line_no: int, nonempty: bool = False) -> str:
    v = _req(obj, key, line_no)
    if not isinstance(v, str):
        raise MalformedRecord(line_no, f"{key!r} must be a string")
    if nonempty and not v:
        raise MalformedRecord(line_no, f"{key!r} must be nonempty")
    return v


def _ts(obj: dict, key: str, line_no: int) -> int:
    v = _req(obj, key, line_no)
    if not _is_int(v) or v < 0:
        raise MalformedRecord(line_no, f"{key!r} must be a non-negative integer")
    return v


def _metric(obj: dict, n: int) -> MetricSample:
    value = _req(obj, "value", n)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedRecord(n, "'value' must be a finite number")
    return MetricSample(_str(obj, "instance", n), _str(obj, "metric", n, True), _ts(obj, "ts", n), float(value))


def _span(obj: dict, n: int) -> Span:
    parent = obj.get("parent_span_id")
    if parent is not None and not isinstance(parent, str):
        raise MalformedRecord(n, "'parent_span_id' must be a string or null")
    status = _req(obj, "status", n)
    if _is_int(status):
        status = str(status)
    if not isinstance(status, str):
        raise MalformedRecord(n, "'status' must be a string")
    return Span(
        trace_id=_str(obj, "trace_id", n, True),
        span_id=_str(obj, "span_id", n, True),
        parent_span_id=parent or None,
        service=_str(obj, "service", n),
        instance_id=_str(obj, "instance", n, True),
        operation=_str(obj, "operation", n),
        start_ts=_ts(obj, "start_ts", n),
        duration=_ts(obj, "duration_ms", n),
        status_code=status,
    )


def _log(obj: dict, n: int) -> LogEntry:
    level = _str(obj, "level", n)
    return LogEntry(_str(obj, "instance", n, True), _ts(obj, "ts", n), level, _str(obj, "message", n, True))


_PARSERS = {"metric": _metric, "trace": _span, "log": _log}


def record_to_json(rec: Record) -> dict:
    if isinstance(rec, MetricSample):
        return {"instance": rec.instance_id, "metric": rec.metric_name, "ts": rec.timestamp, "value": rec.value}
    if isinstance(rec, Span):
        return {
            "trace_id": rec.trace_id,
            "span_id": rec.span_id,
            "parent_span_id": rec.parent_span_id,
            "service": rec.service,
            "instance": rec.instance_id,
            "operation": rec.operation,
            "start_ts": rec.start_ts,
            "duration_ms": rec.duration,
            "status": rec.status_code,
        }
    if isinstance(rec, LogEntry):
        return {"instance": rec.instance_id, "ts": rec.timestamp, "level": rec.level, "message": rec.message}
    raise TypeError(f"not a telemetry record: {type(rec).__name__}")


def load_telemetry(path: str | Path, kind: str) -> list:
    """Load a JSONL file of ``kind`` in {'metric', 'trace', 'log'}.

    Blank lines are skipped. Raises :class:`MalformedRecord` with the 1-based
    line number on the first schema violation; I/O errors propagate as
    ``OSError``.
    """
    try:
        parse = _PARSERS[kind]
    except KeyError:
        raise ValueError(f"unknown telemetry kind {kind!r}") from None
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(n, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(n, "record must be a JSON object")
            out.append(parse(obj, n))
    return out


def save_telemetry(path: str | Path, records: Sequence[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")))
            fh.write("\n")


def load_labels(path: str | Path) -> list[FailureRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(n, f"invalid JSON ({exc.msg})") from None
            out.append(FailureRecord(_ts(obj, "inject_ts", n), _str(obj, "root_cause", n, True),
                                     _str(obj, "failure_type", n, True)))
    return out


def save_labels(path: str | Path, labels: Sequence[FailureRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps({"inject_ts": lab.inject_ts, "root_cause": lab.root_cause_instance,
                                 "failure_type": lab.failure_type}, separators=(",", ":")))
            fh.write("\n")
