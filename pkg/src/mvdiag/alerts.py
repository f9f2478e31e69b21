"""Unified alert extraction for metrics (3-sigma), traces (isolation forest) and logs (rules)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import seeds
from .iforest import IsolationForest
from .logparse import DrainConfig, DrainParser
from .telemetry import LogEntry, MetricSample, Span, TelemetryBundle

logger = logging.getLogger(__name__)

__all__ = [
    "MetricPayload",
    "TracePayload",
    "LogPayload",
    "Alert",
    "MetricBaseline",
    "TraceDetector",
    "LogAlertSet",
    "AlertConfig",
    "AlertExtractor",
    "InsufficientData",
    "UnknownSeries",
    "UnknownPair",
    "NoInvocationPairs",
    "fit_metric_baseline",
    "detect_metric_alerts",
    "invocations",
    "fit_trace_detector",
    "detect_trace_alerts",
    "select_log_alert_keys",
    "detect_log_alerts",
    "save_alerts",
    "load_alerts",
]

MODALITIES = ("metric", "trace", "log")
DEFAULT_SUCCESS_CODES = frozenset({"200", "0", "OK"})
DEFAULT_ERROR_KEYWORDS = frozenset(
    {"ERROR", "Error", "error", "Exception", "exception", "fail", "failed", "FATAL"}
)


class InsufficientData(UserWarning):
    """A metric series has fewer than two training samples and was skipped."""


class UnknownSeries(UserWarning):
    """A windowed metric series has no fitted baseline and was skipped."""


class UnknownPair(UserWarning):
    """An invocation pair has no fitted forest; the global duration 3-sigma rule was used."""


class NoInvocationPairs(ValueError):
    """Training spans contain no parented invocation."""


# -- alert records ------------------------------------------------------------

@dataclass(frozen=True, order=True)
class MetricPayload:
    metric_name: str
    direction: str


@dataclass(frozen=True, order=True)
class TracePayload:
    parent_id: str
    operation: str
    abnormal_type: str


@dataclass(frozen=True, order=True)
class LogPayload:
    log_key: int


Payload = Union[MetricPayload, TracePayload, LogPayload]
_PAYLOAD_FOR = {"metric": MetricPayload, "trace": TracePayload, "log": LogPayload}


@dataclass(frozen=True)
class Alert:
    reporter_id: str
    modality: str
    payload: Payload

    def __post_init__(self):
        if self.modality not in _PAYLOAD_FOR:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not isinstance(self.payload, _PAYLOAD_FOR[self.modality]):
            raise TypeError(f"{self.modality} alert needs a {_PAYLOAD_FOR[self.modality].__name__}")

    def sort_key(self):
        return (self.reporter_id, MODALITIES.index(self.modality), self.token())

    def token(self) -> str:
        """Canonical text of the alert without its reporter, e.g. ``T|frontend-0|GetProduct|PD``."""
        p = self.payload
        if self.modality == "metric":
            return f"M|{p.metric_name}|{p.direction}"
        if self.modality == "trace":
            return f"T|{p.parent_id}|{p.operation}|{p.abnormal_type}"
        return f"L|{p.log_key}"

    def to_json(self) -> dict:
        p = self.payload
        d = {"reporter": self.reporter_id, "modality": self.modality}
        if self.modality == "metric":
            d.update(metric=p.metric_name, direction=p.direction)
        elif self.modality == "trace":
            d.update(parent=p.parent_id, operation=p.operation, abnormal=p.abnormal_type)
        else:
            d.update(log_key=p.log_key)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Alert":
        m = d["modality"]
        if m == "metric":
            payload = MetricPayload(d["metric"], d["direction"])
        elif m == "trace":
            payload = TracePayload(d["parent"], d["operation"], str(d["abnormal"]))
        elif m == "log":
            payload = LogPayload(int(d["log_key"]))
        else:
            raise ValueError(f"unknown modality {m!r}")
        return cls(d["reporter"], m, payload)


def save_alerts(path: str | Path, alerts: Iterable[Alert]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in alerts:
            fh.write(json.dumps(a.to_json(), separators=(",", ":")) + "\n")


def load_alerts(path: str | Path) -> list[Alert]:
    with open(path, encoding="utf-8") as fh:
        return [Alert.from_json(json.loads(line)) for line in fh if line.strip()]


# -- metrics: 3-sigma ---------------------------------------------------------

@dataclass
class MetricBaseline:
    """Per-series mean, population std and sample count."""

    stats: dict[tuple[str, str], tuple[float, float, int]] = field(default_factory=dict)

    def to_json(self) -> list:
        return [[i, m, mu, sd, n] for (i, m), (mu, sd, n) in sorted(self.stats.items())]

    @classmethod
    def from_json(cls, rows: list) -> "MetricBaseline":
        return cls({(i, m): (float(mu), float(sd), int(n)) for i, m, mu, sd, n in rows})


def _series(samples: Iterable[MetricSample]) -> dict[tuple[str, str], list[float]]:
    out: dict[tuple[str, str], list[float]] = defaultdict(list)
    for s in samples:
        out[(s.instance_id, s.metric_name)].append(s.value)
    return out


def fit_metric_baseline(training: Iterable[MetricSample]) -> MetricBaseline:
    stats = {}
    for key, values in sorted(_series(training).items()):
        if len(values) < 2:
            warnings.warn(InsufficientData(f"series {key} has {len(values)} sample(s)"), stacklevel=2)
            continue
        v = np.asarray(values, dtype=np.float64)
        stats[key] = (float(v.mean()), float(v.std()), len(values))
    return MetricBaseline(stats)


def detect_metric_alerts(
    window: Iterable[MetricSample], baseline: MetricBaseline, sigma_floor: float = 1e-8
) -> list[Alert]:
    alerts = []
    for (inst, metric), values in sorted(_series(window).items()):
        stat = baseline.stats.get((inst, metric))
        if stat is None:
            warnings.warn(UnknownSeries(f"no baseline for {(inst, metric)}"), stacklevel=2)
            continue
        mu, sd, _ = stat
        sd = max(sd, sigma_floor)
        v = np.asarray(values)
        if (v > mu + 3 * sd).any():
            alerts.append(Alert(inst, "metric", MetricPayload(metric, "up")))
        if (v < mu - 3 * sd).any():
            alerts.append(Alert(inst, "metric", MetricPayload(metric, "down")))
    return alerts


# -- traces: isolation forest -------------------------------------------------

Pair = tuple[str, str, str]  # (caller instance, callee instance, operation)


def invocations(spans: Sequence[Span]) -> list[tuple[Pair, Span]]:
    """(caller, callee, operation) for every span whose parent span is present."""
    by_id = {(s.trace_id, s.span_id): s for s in spans}
    out = []
    for s in spans:
        if s.parent_span_id is None:
            continue
        parent = by_id.get((s.trace_id, s.parent_span_id))
        if parent is None:
            continue
        out.append(((parent.instance_id, s.instance_id, s.operation), s))
    return out


@dataclass
class TraceDetector:
    forests: dict[Pair, IsolationForest]
    score_threshold: float = 0.6
    success_codes: frozenset[str] = DEFAULT_SUCCESS_CODES
    duration_mu: float = 0.0
    duration_sigma: float = 0.0
    seed: int = 0

    def features(self, spans: Sequence[Span]) -> np.ndarray:
        return np.array(
            [[float(s.duration), 1.0 if s.status_code in self.success_codes else 0.0] for s in spans],
            dtype=np.float64,
        ).reshape(-1, 2)

    def to_json(self) -> dict:
        return {
            "score_threshold": self.score_threshold,
            "success_codes": sorted(self.success_codes),
            "duration_mu": self.duration_mu,
            "duration_sigma": self.duration_sigma,
            "seed": self.seed,
            "forests": [[list(k), f.to_json()] for k, f in sorted(self.forests.items())],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TraceDetector":
        return cls(
            forests={tuple(k): IsolationForest.from_json(f) for k, f in d["forests"]},
            score_threshold=float(d["score_threshold"]),
            success_codes=frozenset(d["success_codes"]),
            duration_mu=float(d["duration_mu"]),
            duration_sigma=float(d["duration_sigma"]),
            seed=int(d["seed"]),
        )


def fit_trace_detector(
    training_spans: Sequence[Span],
    n_trees: int = 100,
    subsample_size: int = 256,
    score_threshold: float = 0.6,
    success_codes: Iterable[str] = DEFAULT_SUCCESS_CODES,
    seed: int = 0,
) -> TraceDetector:
    """Fit one forest per invocation pair on (duration_ms, status_ok)."""
    pairs = invocations(training_spans)
    if not pairs:
        raise NoInvocationPairs("no parented spans in the training window")
    groups: dict[Pair, list[Span]] = defaultdict(list)
    for key, span in pairs:
        groups[key].append(span)
    det = TraceDetector({}, score_threshold, frozenset(success_codes), seed=seed)
    for key in sorted(groups):
        rng = np.random.default_rng(seeds.substream_seed(seed, "iforest/" + "|".join(key)))
        det.forests[key] = IsolationForest(n_trees, subsample_size).fit(det.features(groups[key]), rng)
    d = np.array([s.duration for _, s in pairs], dtype=np.float64)
    det.duration_mu, det.duration_sigma = float(d.mean()), float(d.std())
    return det


def detect_trace_alerts(window_spans: Sequence[Span], model: TraceDetector) -> list[Alert]:
    found: set[tuple[str, str, str, str]] = set()
    groups: dict[Pair, list[Span]] = defaultdict(list)
    for key, span in invocations(window_spans):
        if span.status_code not in model.success_codes:
            found.add((key[1], key[0], key[2], span.status_code))
        else:
            groups[key].append(span)
    for key in sorted(groups):
        spans = groups[key]
        forest = model.forests.get(key)
        if forest is None:
            warnings.warn(UnknownPair(f"no forest for {key}; using global 3-sigma"), stacklevel=2)
            limit = model.duration_mu + 3 * max(model.duration_sigma, 1e-8)
            hit = any(s.duration > limit for s in spans)
        else:
            hit = bool((forest.score(model.features(spans)) > model.score_threshold).any())
        if hit:
            found.add((key[1], key[0], key[2], "PD"))
    return [Alert(c, "trace", TracePayload(p, o, t)) for c, p, o, t in sorted(found)]


# -- logs: rules 1 and 2 ------------------------------------------------------

@dataclass
class LogAlertSet:
    alert_keys: frozenset[int]
    error_keywords: frozenset[str] = DEFAULT_ERROR_KEYWORDS
    low_freq_fraction: float = 0.5

    def to_json(self) -> dict:
        return {
            "alert_keys": sorted(self.alert_keys),
            "error_keywords": sorted(self.error_keywords),
            "low_freq_fraction": self.low_freq_fraction,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "LogAlertSet":
        return cls(frozenset(d["alert_keys"]), frozenset(d["error_keywords"]), float(d["low_freq_fraction"]))


def select_log_alert_keys(
    freq: Mapping[int, int],
    templates: Mapping[int, str],
    low_freq_fraction: float = 0.5,
    error_keywords: Iterable[str] = DEFAULT_ERROR_KEYWORDS,
    error_level_keys: Iterable[int] = (),
) -> LogAlertSet:
    """ERROR-level templates plus the ceil(k * |templates|) rarest ones (ties by id)."""
    if not freq:
        raise ValueError("frequency table is empty")
    if not 0.0 < low_freq_fraction <= 1.0:
        raise ValueError("low_freq_fraction must lie in (0, 1]")
    keywords = frozenset(error_keywords)
    error_level = set(error_level_keys)
    rule1 = {
        tid for tid in freq
        if tid in error_level or any(kw in templates.get(tid, "") for kw in keywords)
    }
    n_low = math.ceil(low_freq_fraction * len(freq))
    rule2 = {tid for tid, _ in sorted(freq.items(), key=lambda kv: (kv[1], kv[0]))[:n_low]}
    return LogAlertSet(frozenset(rule1 | rule2), keywords, low_freq_fraction)


def detect_log_alerts(window_logs: Iterable[LogEntry], parser: DrainParser, alert_set: LogAlertSet) -> list[Alert]:
    """One alert per distinct (instance, alert logKey) seen in the window.

    Uses the parser read-only: messages that would open a new template can
    never carry a registered alert key.
    """
    found: set[tuple[str, int]] = set()
    cache: dict[str, int | None] = {}
    for entry in window_logs:
        tid = cache.get(entry.message, -1)
        if tid == -1:
            tid = cache[entry.message] = parser.match(entry.message)
        if tid is not None and tid in alert_set.alert_keys:
            found.add((entry.instance_id, tid))
    return [Alert(inst, "log", LogPayload(tid)) for inst, tid in sorted(found)]


# -- bundle ---------------------------------------------------------------------

@dataclass
class AlertConfig:
    low_freq_fraction: float = 0.5
    error_keywords: tuple[str, ...] = tuple(sorted(DEFAULT_ERROR_KEYWORDS))
    n_trees: int = 100
    subsample_size: int = 256
    score_threshold: float = 0.6
    success_codes: tuple[str, ...] = tuple(sorted(DEFAULT_SUCCESS_CODES))
    sigma_floor: float = 1e-8
    drain_depth: int = 4
    drain_similarity: float = 0.4
    drain_max_children: int = 100

    def drain(self) -> DrainConfig:
        return DrainConfig(self.drain_depth, self.drain_similarity, self.drain_max_children)


@dataclass
class AlertExtractor:
    """Fitted extractors for all three modalities."""

    config: AlertConfig
    baseline: MetricBaseline
    traces: TraceDetector
    parser: DrainParser
    log_alerts: LogAlertSet
    seed: int = 0

    @classmethod
    def fit(
        cls,
        training: TelemetryBundle,
        log_history: Sequence[LogEntry] | None = None,
        config: AlertConfig | None = None,
        seed: int = 0,
    ) -> "AlertExtractor":
        """Fit baselines and forests on ``training``; mine log templates on ``log_history``.

        ``log_history`` defaults to the training logs. Passing the logs of
        past failure windows lets fault-specific templates enter the alert set.
        """
        cfg = config or AlertConfig()
        baseline = fit_metric_baseline(training.metrics)
        traces = fit_trace_detector(
            training.spans, cfg.n_trees, cfg.subsample_size, cfg.score_threshold,
            cfg.success_codes, seeds.substream_seed(seed, "iforest"),
        )
        parser = DrainParser(cfg.drain())
        error_level: set[int] = set()
        for entry in (training.logs if log_history is None else log_history):
            tid = parser.parse(entry.message)
            if entry.level.upper() in ("ERROR", "FATAL"):
                error_level.add(tid)
        if parser.templates:
            templates = {t.template_id: t.text for t in parser.templates}
            log_alerts = select_log_alert_keys(
                parser.frequency_table(), templates, cfg.low_freq_fraction, cfg.error_keywords, error_level
            )
        else:
            log_alerts = LogAlertSet(frozenset(), frozenset(cfg.error_keywords), cfg.low_freq_fraction)
        logger.info(
            "fitted extractors: %d metric series, %d invocation pairs, %d templates (%d alert keys)",
            len(baseline.stats), len(traces.forests), len(parser.templates), len(log_alerts.alert_keys),
        )
        return cls(cfg, baseline, traces, parser, log_alerts, seed)

    def extract(self, window: TelemetryBundle) -> list[Alert]:
        alerts = (
            detect_metric_alerts(window.metrics, self.baseline, self.config.sigma_floor)
            + detect_trace_alerts(window.spans, self.traces)
            + detect_log_alerts(window.logs, self.parser, self.log_alerts)
        )
        return sorted(alerts, key=Alert.sort_key)

    def to_json(self) -> dict:
        return {
            "format": "mvdiag-extractors/1",
            "seed": self.seed,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.__dict__.items()},
            "metric_baseline": self.baseline.to_json(),
            "trace_detector": self.traces.to_json(),
            "templates": self.parser.to_json(),
            "log_alert_set": self.log_alerts.to_json(),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "AlertExtractor":
        if d.get("format") != "mvdiag-extractors/1":
            raise ValueError("not an extractor bundle")
        raw = dict(d["config"])
        cfg = AlertConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        return cls(
            cfg,
            MetricBaseline.from_json(d["metric_baseline"]),
            TraceDetector.from_json(d["trace_detector"]),
            DrainParser.from_json(d["templates"], cfg.drain()),
            LogAlertSet.from_json(d["log_alert_set"]),
            int(d["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "AlertExtractor":
        return cls.from_json(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        """Short content hash used to pair checkpoints with the extractors they were trained on."""
        blob = json.dumps(
            {"templates": self.parser.to_json(), "log": self.log_alerts.to_json(),
             "pairs": sorted("|".join(k) for k in self.traces.forests), "seed": self.seed},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
