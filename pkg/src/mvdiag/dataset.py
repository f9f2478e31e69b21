"""Labeled failure samples: correlation graph plus per-node, per-modality alert features."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .alerts import MODALITIES, Alert, invocations
from .embedding import EmbeddingTable, encode_tokens
from .telemetry import FailureRecord, Span

__all__ = [
    "InstanceGraph",
    "FailureSample",
    "EmptyTraces",
    "RootCauseNotInGraph",
    "build_graph",
    "group_tokens",
    "sentences",
    "build_sample",
    "save_dataset",
    "load_dataset",
]


class EmptyTraces(ValueError):
    """No spans in the window, so no correlation graph can be derived."""


class RootCauseNotInGraph(ValueError):
    """The labeled root cause is not an instance of the window's graph."""


@dataclass
class InstanceGraph:
    nodes: list[str]
    edges: list[tuple[int, int]]  # directed; every pair is stored in both directions

    def edge_set(self) -> set[tuple[str, str]]:
        return {(self.nodes[a], self.nodes[b]) for a, b in self.edges}

    def neighbors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for a, b in self.edges:
            out[a].append(b)
        for nb in out:
            nb.sort()
        return out


def build_graph(window_spans: Sequence[Span]) -> InstanceGraph:
    if not window_spans:
        raise EmptyTraces("no spans in window")
    index: dict[str, int] = {}
    for s in window_spans:
        index.setdefault(s.instance_id, len(index))
    edges: set[tuple[int, int]] = set()
    for (caller, callee, _), _span in invocations(window_spans):
        a, b = index[caller], index[callee]
        if a != b:
            edges.add((a, b))
            edges.add((b, a))
    return InstanceGraph(list(index), sorted(edges))


def group_tokens(alerts: Iterable[Alert], nodes: Sequence[str]) -> list[tuple[list[str], list[str], list[str]]]:
    """Distinct alert tokens per node and modality, sorted; alerts off the graph are dropped."""
    pos = {n: i for i, n in enumerate(nodes)}
    buckets = [tuple(set() for _ in MODALITIES) for _ in nodes]
    for a in alerts:
        i = pos.get(a.reporter_id)
        if i is not None:
            buckets[i][MODALITIES.index(a.modality)].add(a.token())
    return [tuple(sorted(b) for b in node) for node in buckets]


def sentences(grouped: Iterable[list[tuple[list[str], list[str], list[str]]]]) -> list[list[str]]:
    """Embedding corpus: one sentence per (sample, node, modality) with at least one token."""
    return [toks for sample in grouped for node in sample for toks in node if toks]


@dataclass
class FailureSample:
    graph: InstanceGraph
    features: np.ndarray  # (n_nodes, 3, d)
    root_cause: int | None
    failure_type: int | None
    augmented: bool = False
    node_map: dict[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.graph.nodes)
        if self.features.ndim != 3 or self.features.shape[:2] != (n, 3):
            raise ValueError(f"features must have shape ({n}, 3, d), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.root_cause is not None and not 0 <= self.root_cause < n:
            raise ValueError("root_cause is not a valid node index")

    @property
    def nodes(self) -> list[str]:
        return self.graph.nodes

    @property
    def root_instance(self) -> str | None:
        return None if self.root_cause is None else self.graph.nodes[self.root_cause]

    def to_json(self) -> dict:
        d = {
            "nodes": self.graph.nodes,
            "edges": [list(e) for e in self.graph.edges],
            "features": self.features.tolist(),
            "root_cause": self.root_cause,
            "failure_type": self.failure_type,
            "augmented": self.augmented,
            "meta": self.meta,
        }
        if self.node_map is not None:
            d["node_map"] = [[k, v] for k, v in sorted(self.node_map.items())]
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "FailureSample":
        nm = d.get("node_map")
        feats = np.asarray(d["features"], dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(len(d["nodes"]), 3, 0)
        return cls(
            InstanceGraph(list(d["nodes"]), [tuple(e) for e in d["edges"]]),
            feats,
            d["root_cause"],
            d["failure_type"],
            bool(d.get("augmented", False)),
            None if nm is None else {int(k): int(v) for k, v in nm},
            dict(d.get("meta", {})),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FailureSample):
            return NotImplemented
        return (
            self.graph == other.graph
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and (self.root_cause, self.failure_type, self.augmented, self.node_map, self.meta)
            == (other.root_cause, other.failure_type, other.augmented, other.node_map, other.meta)
        )


def encode_sample_features(
    grouped: Sequence[tuple[list[str], list[str], list[str]]], table: EmbeddingTable
) -> np.ndarray:
    out = np.zeros((len(grouped), 3, table.dim))
    for i, node in enumerate(grouped):
        for m, toks in enumerate(node):
            out[i, m] = encode_tokens(toks, table)
    return out


def build_sample(
    window_spans: Sequence[Span],
    alerts: Iterable[Alert],
    table: EmbeddingTable,
    label: FailureRecord | None = None,
    type_index: Mapping[str, int] | None = None,
) -> FailureSample:
    """Graph from the window's spans and mean-embedded alert features per node.

    ``label`` is optional so the same path serves online diagnosis.
    """
    graph = build_graph(window_spans)
    grouped = group_tokens(alerts, graph.nodes)
    features = encode_sample_features(grouped, table)
    root = ftype = None
    meta = {}
    if label is not None:
        if label.root_cause_instance not in graph.nodes:
            raise RootCauseNotInGraph(f"{label.root_cause_instance} not among {len(graph.nodes)} window instances")
        root = graph.nodes.index(label.root_cause_instance)
        if type_index is None:
            raise ValueError("type_index is required with a label")
        ftype = type_index[label.failure_type]
        meta = {"inject_ts": label.inject_ts}
    return FailureSample(graph, features, root, ftype, meta=meta)


def save_dataset(path: str | Path, samples: Sequence[FailureSample], manifest: Mapping) -> None:
    doc = {"format": "mvdiag-dataset/1", "manifest": dict(manifest), "samples": [s.to_json() for s in samples]}
    Path(path).write_text(json.dumps(doc))


def load_dataset(path: str | Path) -> tuple[list[FailureSample], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "mvdiag-dataset/1":
        raise ValueError(f"{path} is not a dataset file")
    return [FailureSample.from_json(s) for s in doc["samples"]], doc["manifest"]


def alerts_by_failure(alerts: Iterable[tuple[int, Alert]]) -> dict[int, list[Alert]]:
    out: dict[int, list[Alert]] = defaultdict(list)
    for key, a in alerts:
        out[key].append(a)
    return out
