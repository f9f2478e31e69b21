"""Offline (extract, build, train) and online (diagnose, evaluate) phases end to end."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

from . import seeds
from .alerts import Alert, AlertConfig, AlertExtractor
from .augment import AugmentConfig, augment_dataset
from .dataset import FailureSample, build_graph, build_sample, group_tokens, sentences
from .diagnose import Diagnoser, DiagnosisReport
from .embedding import EmbeddingTable, train_embedding
from .evalkit import FtiResult, RclResult, summary
from .model import Checkpoint, ModelConfig, TrainConfig, train
from .telemetry import FailureRecord, TelemetryBundle, TimeWindow

__all__ = [
    "PipelineConfig",
    "Artifacts",
    "alert_window",
    "fit_extractors",
    "extract_alerts",
    "build_samples",
    "fit_embedding",
    "run_offline",
    "evaluate_online",
]

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    alert: AlertConfig = field(default_factory=AlertConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    alert_window_ms: int = 60_000
    use_augmentation: bool = True
    seed: int = 0


def alert_window(label: FailureRecord, width_ms: int) -> TimeWindow:
    return TimeWindow(label.inject_ts, label.inject_ts + width_ms)


def fit_extractors(
    bundle: TelemetryBundle,
    train_window: TimeWindow,
    history: Sequence[FailureRecord],
    cfg: PipelineConfig,
) -> AlertExtractor:
    """Baselines and forests from the clean window; log templates also see past failure windows."""
    training = bundle.window(train_window)
    logs = list(training.logs)
    for lab in history:
        logs.extend(bundle.window(alert_window(lab, cfg.alert_window_ms)).logs)
    return AlertExtractor.fit(training, logs, cfg.alert, seeds.substream_seed(cfg.seed, "extract"))


def extract_alerts(
    bundle: TelemetryBundle, extractor: AlertExtractor, labels: Sequence[FailureRecord], width_ms: int
) -> dict[int, list[Alert]]:
    return {lab.inject_ts: extractor.extract(bundle.window(alert_window(lab, width_ms))) for lab in labels}


def fit_embedding(
    bundle: TelemetryBundle, alerts: dict[int, list[Alert]], labels: Sequence[FailureRecord], cfg: PipelineConfig
) -> EmbeddingTable:
    grouped = []
    for lab in labels:
        spans = bundle.window(alert_window(lab, cfg.alert_window_ms)).spans
        grouped.append(group_tokens(alerts[lab.inject_ts], build_graph(spans).nodes))
    return train_embedding(sentences(grouped), dim=cfg.model.input_dim, seed=seeds.substream_seed(cfg.seed, "embedding"))


def build_samples(
    bundle: TelemetryBundle,
    alerts: dict[int, list[Alert]],
    labels: Sequence[FailureRecord],
    table: EmbeddingTable,
    type_labels: Sequence[str],
    width_ms: int,
) -> list[FailureSample]:
    index = {t: i for i, t in enumerate(type_labels)}
    return [
        build_sample(bundle.window(alert_window(lab, width_ms)).spans, alerts[lab.inject_ts], table, lab, index)
        for lab in labels
    ]


@dataclass
class Artifacts:
    extractor: AlertExtractor
    table: EmbeddingTable
    checkpoint: Checkpoint
    train_samples: list[FailureSample]
    timings_s: dict[str, float]


def run_offline(
    bundle: TelemetryBundle,
    train_window: TimeWindow,
    train_labels: Sequence[FailureRecord],
    cfg: PipelineConfig,
    type_labels: Sequence[str] | None = None,
) -> Artifacts:
    t0 = time.perf_counter()
    extractor = fit_extractors(bundle, train_window, train_labels, cfg)
    alerts = extract_alerts(bundle, extractor, train_labels, cfg.alert_window_ms)
    t1 = time.perf_counter()
    table = fit_embedding(bundle, alerts, train_labels, cfg)
    types = list(type_labels) if type_labels is not None else sorted({lab.failure_type for lab in train_labels})
    samples = build_samples(bundle, alerts, train_labels, table, types, cfg.alert_window_ms)
    if cfg.use_augmentation:
        aug_cfg = AugmentConfig(cfg.augment.inactivation_probability, cfg.augment.copies_per_sample,
                                seeds.substream_seed(cfg.seed, "augment"))
        samples = augment_dataset(samples, aug_cfg)
    t2 = time.perf_counter()
    mcfg = ModelConfig(**{**cfg.model.__dict__, "input_dim": table.dim, "n_classes": len(types)})
    ck = train(samples, mcfg, cfg.train, seeds.substream_seed(cfg.seed, "train"), types,
               {"extractors": extractor.fingerprint(), "embedding": table.fingerprint()})
    t3 = time.perf_counter()
    timings = {"extract": t1 - t0, "build": t2 - t1, "train": t3 - t2, "total": t3 - t0}
    log.info("offline phase: %s", {k: round(v, 2) for k, v in timings.items()})
    return Artifacts(extractor, table, ck, samples, timings)


def evaluate_online(
    bundle: TelemetryBundle, labels: Sequence[FailureRecord], diagnoser: Diagnoser, width_ms: int
) -> tuple[dict, list[DiagnosisReport]]:
    """Diagnose every labeled window and score the reports."""
    types = diagnoser.checkpoint.type_labels
    rcl, fti, reports = [], [], []
    for lab in labels:
        rep = diagnoser.diagnose(bundle.window(alert_window(lab, width_ms)))
        reports.append(rep)
        rcl.append(RclResult(tuple(i for i, _ in rep.ranking), lab.root_cause_instance))
        truth = types.index(lab.failure_type) if lab.failure_type in types else -1
        fti.append(FtiResult(types.index(rep.failure_type[0]), truth))
    out = summary(rcl, fti)
    times = [r.timing_ms["total"] / 1e3 for r in reports]
    out["online_s_mean"] = sum(times) / len(times) if times else 0.0
    out["online_s_max"] = max(times) if times else 0.0
    return out, reports
