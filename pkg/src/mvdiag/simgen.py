"""Synthetic microservice telemetry with scripted fault injection.

Requests enter at the frontend and fan out over a service DAG; every hop is
one server-side span. Faults change the root instance's own latency, status
codes, metrics and logs, and callers inherit the effect through their child
calls (a caller's duration includes its children, a failed child fails the
caller). Nothing here is a queueing model: the propagation is scripted so the
ground truth stays controllable.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeds
from .telemetry import FailureRecord, LogEntry, MetricSample, Span, TelemetryBundle, save_labels

__all__ = [
    "FAULT_TYPES",
    "LOG_TEMPLATES",
    "METRICS",
    "Topology",
    "FaultSpec",
    "FaultTargetUnknown",
    "SimConfig",
    "generate",
    "schedule_faults",
    "split_labels",
    "write_corpus",
]

FAULT_TYPES = ("cpu-hog", "mem-stress", "net-delay", "packet-loss", "packet-corruption", "process-exit")
METRICS = ("cpu_usage", "memory_usage", "network_receive", "network_transmit", "request_count", "error_count")


class FaultTargetUnknown(ValueError):
    pass


@dataclass
class Topology:
    services: dict[str, int]
    call_edges: list[tuple[str, str, str]]  # (caller service, callee service, operation)
    frontend: str = "frontend"
    entry_operation: str = "GET /home"
    # median self time per service in ms
    latency_ms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.call_edges = [tuple(e) for e in self.call_edges]
        if self.frontend not in self.services:
            raise ValueError(f"frontend {self.frontend!r} is not a service")
        for a, b, _ in self.call_edges:
            if a not in self.services or b not in self.services:
                raise ValueError(f"edge {a}->{b} references an unknown service")
        order = self.topological_order()
        reach = {self.frontend}
        for s in order:
            if s in reach:
                reach.update(b for a, b, _ in self.call_edges if a == s)
        missing = set(self.services) - reach
        if missing:
            raise ValueError(f"services unreachable from the frontend: {sorted(missing)}")

    def topological_order(self) -> list[str]:
        indeg = {s: 0 for s in self.services}
        for _, b, _ in self.call_edges:
            indeg[b] += 1
        ready = sorted(s for s, d in indeg.items() if d == 0)
        out = []
        while ready:
            s = ready.pop(0)
            out.append(s)
            for a, b, _ in self.call_edges:
                if a == s:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
                        ready.sort()
        if len(out) != len(self.services):
            raise ValueError("call graph has a cycle")
        return out

    def instances(self, service: str | None = None) -> list[str]:
        names = [service] if service else list(self.services)
        return [f"{s}-{i}" for s in names for i in range(self.services[s])]

    def service_of(self, instance: str) -> str:
        return instance.rsplit("-", 1)[0]

    def callees(self, service: str) -> list[tuple[str, str]]:
        return [(b, op) for a, b, op in self.call_edges if a == service]

    def callers(self, service: str) -> list[str]:
        return sorted({a for a, b, _ in self.call_edges if b == service})

    @classmethod
    def default(cls) -> "Topology":
        """Five services with two instances each, three levels deep."""
        return cls(
            services={"frontend": 2, "cart": 2, "product": 2, "currency": 2, "redis": 2},
            call_edges=[
                ("frontend", "cart", "GetCart"),
                ("frontend", "product", "ListProducts"),
                ("cart", "redis", "HGETALL"),
                ("product", "currency", "Convert"),
                ("product", "redis", "GET"),
            ],
            latency_ms={"frontend": 12.0, "cart": 18.0, "product": 22.0, "currency": 14.0, "redis": 9.0},
        )

    def to_json(self) -> dict:
        return {"services": self.services, "call_edges": [list(e) for e in self.call_edges],
                "frontend": self.frontend, "entry_operation": self.entry_operation, "latency_ms": self.latency_ms}

    @classmethod
    def from_json(cls, d: dict) -> "Topology":
        return cls(dict(d["services"]), [tuple(e) for e in d["call_edges"]], d.get("frontend", "frontend"),
                   d.get("entry_operation", "GET /home"), dict(d.get("latency_ms", {})))


@dataclass(frozen=True)
class FaultSpec:
    type: str
    target_instance: str
    start_ts: int
    duration_ms: int
    severity: float = 1.0

    def __post_init__(self):
        if self.type not in FAULT_TYPES:
            raise ValueError(f"unknown fault type {self.type!r}")
        if not 0.0 < self.severity <= 1.0:
            raise ValueError("severity must lie in (0, 1]")
        if self.duration_ms <= 0:
            raise ValueError("duration_ms must be positive")

    def active(self, ts: int) -> bool:
        return self.start_ts <= ts < self.start_ts + self.duration_ms


@dataclass
class SimConfig:
    seed: int = 0
    workload_rps: float = 0.25
    warmup_ms: int = 60 * 60_000
    fault_ms: int = 60_000
    gap_ms: int = 60_000
    faults_per_type: int = 20
    metric_interval_ms: int = 15_000
    start_ts: int = 1_700_000_000_000
    test_fraction: float = 0.2
    latency_sigma: float = 0.25
    severity_range: tuple[float, float] = (0.7, 1.0)


# every message the generator can emit: key -> (level, format)
LOG_TEMPLATES = {
    "served": ("INFO", "{op} served in {n} ms"),
    "health": ("INFO", "health check passed in {n} ms"),
    "cache": ("INFO", "cache refreshed with {n} entries"),
    "pool": ("DEBUG", "connection pool resized to {n}"),
    "upstream_error": ("WARN", "upstream {service} answered {code} for {op}"),
    "gc_pause": ("WARN", "GC pause of {n} ms exceeded budget"),
    "saturated": ("WARN", "worker pool saturated with {n} tasks queued"),
    "io_timeout": ("ERROR", "read tcp {ip}:{port}: i/o timeout"),
    "checksum": ("ERROR", "checksum mismatch on segment from {ip}, dropping connection"),
    "process_exit": ("ERROR", "process exited unexpectedly with code 137"),
}

# fault effect sizes at severity 1
CPU_HOG_SLOWDOWN = 4.0
NET_DELAY_MS = 250.0
LOSS_FAIL_P = 0.5
LOSS_TIMEOUT_MS = 1000
LOSS_RETRANSMIT_MS = 120.0
CORRUPT_FAIL_P = 0.4


def _ip(instance: str) -> str:
    h = sum(ord(c) * (i + 1) for i, c in enumerate(instance))
    return f"10.0.{h % 250}.{(h // 250) % 250 + 2}"


class _Sim:
    def __init__(self, topo: Topology, faults: Sequence[FaultSpec], cfg: SimConfig, start_ts: int, end_ts: int):
        self.topo = topo
        self.cfg = cfg
        self.start_ts = start_ts
        self.end_ts = end_ts
        self.rng = np.random.default_rng(seeds.substream_seed(cfg.seed, "simgen"))
        self.by_target: dict[str, list[FaultSpec]] = defaultdict(list)
        for f in faults:
            self.by_target[f.target_instance].append(f)
        self.spans: list[Span] = []
        self.logs: list[LogEntry] = []
        # per-instance, per-tick traffic counters
        self.calls: dict[tuple[str, int], int] = defaultdict(int)
        self.errors: dict[tuple[str, int], int] = defaultdict(int)
        self._span_seq = 0

    def fault_at(self, instance: str, ts: int) -> FaultSpec | None:
        for f in self.by_target.get(instance, ()):
            if f.active(ts):
                return f
        return None

    def tick(self, ts: int) -> int:
        return (ts - self.start_ts) // self.cfg.metric_interval_ms

    def log(self, instance: str, ts: int, key: str, **fields) -> None:
        level, fmt = LOG_TEMPLATES[key]
        self.logs.append(LogEntry(instance, int(ts), level, fmt.format(**fields)))

    # -- traces ------------------------------------------------------------

    def call(self, trace_id: str, service: str, operation: str, parent: str | None,
             caller: str | None, start: int) -> tuple[int, str]:
        rng = self.rng
        inst = self.topo.instances(service)[int(rng.integers(self.topo.services[service]))]
        self._span_seq += 1
        span_id = f"s{self._span_seq}"
        fault = self.fault_at(inst, start)
        tick = self.tick(start)
        self.calls[(inst, tick)] += 1
        ftype = fault.type if fault else None
        sev = fault.severity if fault else 0.0

        status = "200"
        children: list[tuple[str, str]] = []
        self_ms = self.topo.latency_ms.get(service, 10.0) * math.exp(rng.normal(0.0, self.cfg.latency_sigma))
        if ftype == "process-exit":
            # the sidecar answers for the dead process
            status, self_ms = "503", float(rng.integers(0, 3))
        elif ftype == "packet-loss" and rng.random() < LOSS_FAIL_P * sev:
            status, self_ms = "504", float(LOSS_TIMEOUT_MS)
            self.log(inst, start + LOSS_TIMEOUT_MS, "io_timeout", ip=_ip(inst), port=8000 + int(rng.integers(1000)))
        elif ftype == "packet-corruption" and rng.random() < CORRUPT_FAIL_P * sev:
            status = "502"
            self.log(inst, start + 1, "checksum", ip=_ip(caller or inst))
        else:
            children = self.topo.callees(service)
            if ftype == "cpu-hog":
                self_ms *= 1.0 + CPU_HOG_SLOWDOWN * sev
            elif ftype == "net-delay":
                self_ms += NET_DELAY_MS * sev * math.exp(rng.normal(0.0, 0.1))
            elif ftype == "packet-loss":
                self_ms += LOSS_RETRANSMIT_MS * sev * rng.random()

        elapsed = self_ms / 2.0
        failed_child = None
        for callee, op in children:
            d, st = self.call(trace_id, callee, op, span_id, inst, start + int(elapsed))
            elapsed += d
            if st != "200" and failed_child is None:
                failed_child = (callee, st)
        elapsed += self_ms / 2.0
        if failed_child is not None:
            status = "500"
            self.log(inst, start + int(elapsed), "upstream_error",
                     service=failed_child[0], code=failed_child[1], op=operation)
        duration = max(0, int(round(elapsed)))
        if status != "200":
            self.errors[(inst, tick)] += 1
        elif rng.random() < 0.5:
            self.log(inst, start + duration, "served", op=operation, n=duration)
        self.spans.append(Span(trace_id, span_id, parent, service, inst, operation, int(start), duration, status))
        return duration, status

    def traffic(self) -> None:
        gap = 1000.0 / self.cfg.workload_rps
        t = float(self.start_ts)
        n = 0
        while True:
            t += self.rng.exponential(gap)
            if t >= self.end_ts:
                break
            n += 1
            self._span_seq = 0
            self.call(f"t{n:07d}", self.topo.frontend, self.topo.entry_operation, None, None, int(t))

    # -- logs that are not tied to requests ------------------------------------

    def background_logs(self) -> None:
        rng = self.rng
        step = self.cfg.metric_interval_ms
        for inst in self.topo.instances():
            for ts in range(self.start_ts, self.end_ts, step):
                jitter = int(rng.integers(step))
                if rng.random() < 0.3:
                    self.log(inst, ts + jitter, "health", n=int(rng.integers(1, 9)))
                if rng.random() < 0.02:
                    self.log(inst, ts + jitter, "cache", n=int(rng.integers(100, 900)))
                if rng.random() < 0.004:
                    self.log(inst, ts + jitter, "pool", n=int(rng.integers(8, 64)))

    def fault_logs(self) -> None:
        rng = self.rng
        for inst, faults in sorted(self.by_target.items()):
            for f in faults:
                end = f.start_ts + f.duration_ms
                if f.type == "mem-stress":
                    for ts in range(f.start_ts, end, 10_000):
                        self.log(inst, ts + int(rng.integers(5000)), "gc_pause",
                                 n=int(300 + 700 * f.severity * rng.random()))
                elif f.type == "cpu-hog":
                    for ts in range(f.start_ts, end, 20_000):
                        self.log(inst, ts + int(rng.integers(5000)), "saturated", n=int(rng.integers(20, 80)))
                elif f.type == "process-exit":
                    self.log(inst, f.start_ts + int(rng.integers(500)), "process_exit")

    # -- metrics ---------------------------------------------------------------

    def metrics(self) -> list[MetricSample]:
        rng = self.rng
        out = []
        step = self.cfg.metric_interval_ms
        for ts in range(self.start_ts, self.end_ts, step):
            tick = self.tick(ts)
            for inst in self.topo.instances():
                calls = self.calls.get((inst, tick), 0)
                errs = self.errors.get((inst, tick), 0)
                f = self.fault_at(inst, ts + step // 2)
                ftype = f.type if f else None
                sev = f.severity if f else 0.0
                cpu = 0.25 + 0.004 * calls + rng.normal(0, 0.02)
                mem = 512.0 + rng.normal(0, 8.0)
                rx = 800.0 + 2.0 * calls + rng.normal(0, 20.0)
                tx = 900.0 + 2.5 * calls + rng.normal(0, 20.0)
                req = 60.0 + calls + round(rng.normal(0, 3.0))
                if ftype == "cpu-hog":
                    cpu += 0.55 * sev
                elif ftype == "mem-stress":
                    mem += 450.0 * sev
                elif ftype == "packet-loss":
                    rx *= 1.0 - 0.6 * sev
                    tx *= 1.0 - 0.6 * sev
                elif ftype == "packet-corruption":
                    rx *= 1.0 - 0.5 * sev
                elif ftype == "net-delay":
                    # egress delay throttles windowed TCP senders
                    tx *= 1.0 - 0.4 * sev
                elif ftype == "process-exit":
                    cpu, mem, rx, tx, req = 0.0, 0.0, 0.0, 0.0, 0.0
                values = {
                    "cpu_usage": max(cpu, 0.0),
                    "memory_usage": mem,
                    "network_receive": max(rx, 0.0),
                    "network_transmit": max(tx, 0.0),
                    "request_count": float(max(req, 0.0)),
                    "error_count": float(errs),
                }
                for name in METRICS:
                    out.append(MetricSample(inst, name, ts, float(values[name])))
        return out


def generate(
    topology: Topology,
    workload_rps: float,
    duration_ms: int,
    faults: Sequence[FaultSpec],
    seed: int = 0,
    start_ts: int = 1_700_000_000_000,
    config: SimConfig | None = None,
) -> tuple[TelemetryBundle, list[FailureRecord]]:
    """Simulate ``duration_ms`` of traffic with the given faults injected."""
    known = set(topology.instances())
    end_ts = start_ts + duration_ms
    for f in faults:
        if f.target_instance not in known:
            raise FaultTargetUnknown(f"{f.target_instance!r} is not an instance of the topology")
        if f.start_ts < start_ts or f.start_ts + f.duration_ms > end_ts:
            raise ValueError(f"fault at {f.start_ts} does not fit in the simulated span")
    cfg = config or SimConfig()
    cfg = SimConfig(**{**asdict(cfg), "seed": seed, "workload_rps": workload_rps})
    sim = _Sim(topology, faults, cfg, start_ts, end_ts)
    sim.traffic()
    sim.background_logs()
    sim.fault_logs()
    metrics = sim.metrics()
    spans = sorted(sim.spans, key=lambda s: (s.start_ts, s.trace_id, s.span_id))
    logs = sorted(sim.logs, key=lambda e: (e.timestamp, e.instance_id, e.message))
    metrics.sort(key=lambda m: (m.timestamp, m.instance_id, m.metric_name))
    labels = [FailureRecord(f.start_ts, f.target_instance, f.type) for f in sorted(faults, key=lambda f: f.start_ts)]
    return TelemetryBundle(metrics, spans, logs), labels


def schedule_faults(topology: Topology, cfg: SimConfig) -> list[FaultSpec]:
    """``faults_per_type`` injections of every type, back to back after the warm-up.

    Targets cycle through all instances so each (type, instance) pair recurs
    evenly; the interleaving of types is shuffled.
    """
    rng = np.random.default_rng(seeds.substream_seed(cfg.seed, "simgen/schedule"))
    insts = topology.instances()
    plan = []
    for k, ftype in enumerate(FAULT_TYPES):
        for j in range(cfg.faults_per_type):
            plan.append((ftype, insts[(j + k) % len(insts)]))
    order = rng.permutation(len(plan))
    lo, hi = cfg.severity_range
    out = []
    t = cfg.start_ts + cfg.warmup_ms
    for i in order:
        ftype, target = plan[i]
        out.append(FaultSpec(ftype, target, t, cfg.fault_ms, float(rng.uniform(lo, hi))))
        t += cfg.fault_ms + cfg.gap_ms
    return out


def split_labels(labels: Sequence[FailureRecord], test_fraction: float, seed: int) -> tuple[list, list]:
    """Stratified by failure type so both splits see every class."""
    rng = np.random.default_rng(seeds.substream_seed(seed, "simgen/split"))
    by_type: dict[str, list[FailureRecord]] = defaultdict(list)
    for lab in labels:
        by_type[lab.failure_type].append(lab)
    train, test = [], []
    for ftype in sorted(by_type):
        group = by_type[ftype]
        idx = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        test += [group[i] for i in idx[:n_test]]
        train += [group[i] for i in idx[n_test:]]
    key = lambda lab: lab.inject_ts  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


def write_corpus(out_dir: str | Path, cfg: SimConfig | None = None, topology: Topology | None = None) -> dict:
    """Generate the default desk corpus into ``out_dir`` and return its manifest."""
    cfg = cfg or SimConfig()
    topo = topology or Topology.default()
    faults = schedule_faults(topo, cfg)
    duration = cfg.warmup_ms + len(faults) * (cfg.fault_ms + cfg.gap_ms)
    bundle, labels = generate(topo, cfg.workload_rps, duration, faults, cfg.seed, cfg.start_ts, cfg)
    train, test = split_labels(labels, cfg.test_fraction, cfg.seed)
    out = Path(out_dir)
    bundle.to_dir(out)
    save_labels(out / "labels.jsonl", labels)
    save_labels(out / "labels_train.jsonl", train)
    save_labels(out / "labels_test.jsonl", test)
    manifest = {
        "seed": cfg.seed,
        "config": asdict(cfg),
        "topology": topo.to_json(),
        "faults": [asdict(f) for f in faults],
        "train_window": [cfg.start_ts, cfg.start_ts + cfg.warmup_ms],
        "alert_window_ms": cfg.fault_ms,
        "end_ts": cfg.start_ts + duration,
        "counts": {"metrics": len(bundle.metrics), "spans": len(bundle.spans), "logs": len(bundle.logs),
                   "train": len(train), "test": len(test)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
