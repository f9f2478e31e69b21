"""Online diagnosis of one window: ranked root causes, failure type, modality attribution."""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .alerts import MODALITIES, AlertExtractor
from .dataset import build_sample
from .embedding import EmbeddingTable
from .model import Checkpoint, DiagnosisModel, collate
from .telemetry import TelemetryBundle

__all__ = ["ChecksumMismatch", "DiagnosisReport", "Diagnoser", "diagnose", "modality_shapley", "canonical_window"]


class ChecksumMismatch(ValueError):
    """The checkpoint was trained against different extractors or embeddings."""


@dataclass
class DiagnosisReport:
    ranking: list[tuple[str, float]]
    failure_type: tuple[str, float]
    class_probs: list[float]
    modality_shap: dict[str, dict[str, float]]
    timing_ms: dict[str, float] = field(default_factory=dict)
    n_alerts: int = 0

    @property
    def top(self) -> str:
        return self.ranking[0][0]

    def to_json(self, timing: bool = True) -> dict:
        d = {
            "ranking": [[i, p] for i, p in self.ranking],
            "failure_type": list(self.failure_type),
            "class_probs": self.class_probs,
            "shap": self.modality_shap,
            "n_alerts": self.n_alerts,
        }
        if timing:
            d["timing_ms"] = self.timing_ms
        return d

    def dumps(self, timing: bool = True) -> str:
        return json.dumps(self.to_json(timing), indent=2)


def modality_shapley(
    value_fn: Callable[[frozenset], float], players: Sequence[str] = MODALITIES
) -> dict[str, float]:
    """Exact Shapley values by the subset-weight formula (every coalition evaluated once)."""
    players = list(players)
    n = len(players)
    cache: dict[frozenset, float] = {}
    for r in range(n + 1):
        for combo in itertools.combinations(players, r):
            key = frozenset(combo)
            cache[key] = float(value_fn(key))
    out = {}
    for p in players:
        others = [q for q in players if q != p]
        acc = 0.0
        for r in range(n):
            w = math.factorial(r) * math.factorial(n - r - 1) / math.factorial(n)
            for combo in itertools.combinations(others, r):
                s = frozenset(combo)
                acc += w * (cache[s | {p}] - cache[s])
        out[p] = acc
    return out


def canonical_window(window: TelemetryBundle) -> TelemetryBundle:
    """Sort records so that results do not depend on input file order."""
    return TelemetryBundle(
        sorted(window.metrics, key=lambda m: (m.timestamp, m.instance_id, m.metric_name, m.value)),
        sorted(window.spans, key=lambda s: (s.start_ts, s.trace_id, s.span_id)),
        sorted(window.logs, key=lambda e: (e.timestamp, e.instance_id, e.level, e.message)),
    )


class Diagnoser:
    """Frozen artifacts plus a built model, reusable across windows."""

    def __init__(self, extractor: AlertExtractor, table: EmbeddingTable, checkpoint: Checkpoint, verify: bool = True):
        if verify:
            fp = checkpoint.fingerprints
            if "extractors" in fp and fp["extractors"] != extractor.fingerprint():
                raise ChecksumMismatch("checkpoint was trained with different extractors")
            if "embedding" in fp and fp["embedding"] != table.fingerprint():
                raise ChecksumMismatch("checkpoint was trained with a different embedding table")
        self.extractor = extractor
        self.table = table
        self.checkpoint = checkpoint
        self.model: DiagnosisModel = checkpoint.build_model()

    def diagnose(self, window: TelemetryBundle) -> DiagnosisReport:
        timing = {}
        t0 = time.perf_counter()
        window = canonical_window(window)
        alerts = self.extractor.extract(window)
        t1 = time.perf_counter()
        sample = build_sample(window.spans, alerts, self.table)
        batch = collate([sample])
        t2 = time.perf_counter()
        model = self.model
        with torch.no_grad():
            nodes, graphs = model.encode(batch)
            logits, scores = model.heads(nodes, graphs)
            node_p = torch.softmax(scores, dim=0)
            class_p = torch.softmax(logits, dim=1)[0]
        t3 = time.perf_counter()

        names = sample.nodes
        probs = node_p.tolist()
        order = sorted(range(len(names)), key=lambda i: (-probs[i], names[i]))
        ranking = [(names[i], probs[i]) for i in order]
        top = order[0]
        cls = int(torch.argmax(class_p))
        labels = self.checkpoint.type_labels

        def masked(blocks: list[torch.Tensor], keep: frozenset) -> list[torch.Tensor]:
            return [b if m in keep else torch.zeros_like(b) for m, b in zip(MODALITIES, blocks)]

        def fti_value(keep: frozenset) -> float:
            with torch.no_grad():
                lg = model.fti_head(torch.cat(masked(graphs, keep), dim=1))
                return torch.softmax(lg, dim=1)[0, cls].item()

        def rcl_value(keep: frozenset) -> float:
            with torch.no_grad():
                sc = model.rcl_head(torch.cat(masked(nodes, keep), dim=1)).squeeze(1)
                return torch.softmax(sc, dim=0)[top].item()

        shap = {"rcl": modality_shapley(rcl_value), "fti": modality_shapley(fti_value)}
        t4 = time.perf_counter()
        timing.update({
            "alerts": (t1 - t0) * 1e3,
            "features": (t2 - t1) * 1e3,
            "model": (t3 - t2) * 1e3,
            "shap": (t4 - t3) * 1e3,
            "total": (t4 - t0) * 1e3,
        })
        return DiagnosisReport(
            ranking=ranking,
            failure_type=(labels[cls], class_p[cls].item()),
            class_probs=class_p.tolist(),
            modality_shap=shap,
            timing_ms=timing,
            n_alerts=len(alerts),
        )


def diagnose(
    window: TelemetryBundle, extractor: AlertExtractor, table: EmbeddingTable, checkpoint: Checkpoint
) -> DiagnosisReport:
    return Diagnoser(extractor, table, checkpoint).diagnose(window)
