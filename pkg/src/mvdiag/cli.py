"""Command-line entry point: ``mvdiag <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import torch

from . import seeds
from .alerts import Alert, AlertExtractor
from .augment import AugmentConfig, augment_dataset
from .config import Config, ConfigError, load_config
from .dataset import load_dataset, save_dataset
from .diagnose import Diagnoser
from .embedding import EmbeddingTable
from .evalkit import FtiResult, RclResult, dumps_summary, summary
from .model import Checkpoint, ModelConfig, collate, train
from .pipeline import build_samples, extract_alerts, fit_embedding, fit_extractors
from .simgen import SimConfig, write_corpus
from .telemetry import TelemetryBundle, TimeWindow, load_labels

log = logging.getLogger("mvdiag")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _window(text: str) -> TimeWindow:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"window must be START,END in ms, got {text!r}") from None
    return TimeWindow(a, b)


def _emit(doc: str, out: str | None) -> None:
    if out:
        Path(out).write_text(doc + "\n")
    else:
        print(doc)


# -- commands -------------------------------------------------------------------

def cmd_simulate(args, cfg: Config) -> None:
    sim = SimConfig(seed=cfg.seed, faults_per_type=args.faults_per_type, fault_ms=cfg.alert_window_ms)
    if args.rps is not None:
        sim.workload_rps = args.rps
    manifest = write_corpus(args.out, sim)
    log.info("wrote corpus to %s: %s", args.out, manifest["counts"])


def cmd_extract(args, cfg: Config) -> None:
    bundle = TelemetryBundle.from_dir(args.telemetry)
    labels = load_labels(args.labels)
    pcfg = cfg.pipeline()
    if args.alert_window is not None:
        pcfg.alert_window_ms = args.alert_window
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.extractors:
        extractor = AlertExtractor.load(args.extractors)
    else:
        if args.train_window is None:
            raise UsageError("--train-window is required unless --extractors is given")
        extractor = fit_extractors(bundle, _window(args.train_window), labels, pcfg)
        extractor.save(out / "extractors.json")
    alerts = extract_alerts(bundle, extractor, labels, pcfg.alert_window_ms)
    with open(out / "alerts.jsonl", "w", encoding="utf-8") as fh:
        for ts in sorted(alerts):
            for a in alerts[ts]:
                fh.write(json.dumps({"inject_ts": ts, **a.to_json()}, separators=(",", ":")) + "\n")
    log.info("extracted %d alerts for %d windows", sum(map(len, alerts.values())), len(alerts))


def _read_alerts(path: str) -> dict[int, list[Alert]]:
    out: dict[int, list[Alert]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[int(d["inject_ts"])].append(Alert.from_json(d))
    return out


def cmd_build_dataset(args, cfg: Config) -> None:
    bundle = TelemetryBundle.from_dir(args.telemetry)
    labels = load_labels(args.labels)
    alerts = _read_alerts(args.alerts)
    for lab in labels:
        alerts.setdefault(lab.inject_ts, [])
    pcfg = cfg.pipeline()
    if args.embedding:
        table = EmbeddingTable.load(args.embedding)
    else:
        table = fit_embedding(bundle, alerts, labels, pcfg)
        table.save(Path(args.out).with_name("embedding.json") if not args.embedding_out else args.embedding_out)
    types = args.types.split(",") if args.types else sorted({lab.failure_type for lab in labels})
    samples = build_samples(bundle, alerts, labels, table, types, pcfg.alert_window_ms)
    augment = cfg.augmentation and not args.no_augment
    if augment:
        samples = augment_dataset(samples, AugmentConfig(cfg.inactivation_probability, cfg.copies_per_sample,
                                                         seeds.substream_seed(cfg.seed, "augment")))
    manifest = {"type_labels": types, "embedding": table.fingerprint(), "augmented": augment,
                "alert_window_ms": pcfg.alert_window_ms, "seed": cfg.seed}
    save_dataset(args.out, samples, manifest)
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args, cfg: Config) -> None:
    samples, manifest = load_dataset(args.dataset)
    pcfg = cfg.pipeline()
    types = manifest["type_labels"]
    dim = samples[0].features.shape[2] if samples else cfg.embedding_dim
    mcfg = ModelConfig(**{**pcfg.model.__dict__, "input_dim": dim, "n_classes": len(types)})
    fps = {"embedding": manifest["embedding"]}
    if args.extractors:
        fps["extractors"] = AlertExtractor.load(args.extractors).fingerprint()
    ck = train(samples, mcfg, pcfg.train, seeds.substream_seed(cfg.seed, "train"), types, fps)
    ck.save(args.out)
    trace = args.loss_trace or str(Path(args.out).with_suffix(".loss.jsonl"))
    with open(trace, "w", encoding="utf-8") as fh:
        for epoch, value in enumerate(ck.loss_history):
            fh.write(json.dumps({"epoch": epoch, "loss": value}) + "\n")
    log.info("trained %d epochs, best epoch %d", len(ck.loss_history), ck.epoch)


def _diagnoser(args) -> Diagnoser:
    return Diagnoser(AlertExtractor.load(args.extractors), EmbeddingTable.load(args.embedding),
                     Checkpoint.load(args.checkpoint))


def cmd_diagnose(args, cfg: Config) -> None:
    bundle = TelemetryBundle.from_dir(args.telemetry).window(_window(args.window))
    report = _diagnoser(args).diagnose(bundle)
    _emit(report.dumps(timing=not args.no_timing), args.out)


def cmd_explain(args, cfg: Config) -> None:
    bundle = TelemetryBundle.from_dir(args.telemetry).window(_window(args.window))
    report = _diagnoser(args).diagnose(bundle)
    doc = {"top": report.ranking[0], "failure_type": list(report.failure_type), "shap": report.modality_shap}
    _emit(json.dumps(doc, indent=2), args.out)


def cmd_evaluate(args, cfg: Config) -> None:
    rcl, fti = [], []
    if args.predictions:
        with open(args.predictions, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    rcl.append(RclResult(tuple(d["ranking"]), d["root_cause"]))
                    if "predicted_type" in d:
                        fti.append(FtiResult(d["predicted_type"], d["failure_type"]))
    elif args.checkpoint and args.dataset:
        ck = Checkpoint.load(args.checkpoint)
        samples, _ = load_dataset(args.dataset)
        model = ck.build_model()
        with torch.no_grad():
            for s in samples:
                if s.augmented:
                    continue
                out = model(collate([s]))
                probs = torch.softmax(out.rcl_scores, 0).tolist()
                order = sorted(range(len(s.nodes)), key=lambda i: (-probs[i], s.nodes[i]))
                rcl.append(RclResult(tuple(s.nodes[i] for i in order), s.root_instance))
                fti.append(FtiResult(int(torch.argmax(out.fti_logits[0])), s.failure_type))
    else:
        raise UsageError("evaluate needs --predictions or both --checkpoint and --dataset")
    if not rcl:
        raise UsageError("nothing to evaluate")
    _emit(dumps_summary(summary(rcl, fti or None)), args.out)


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvdiag", description="Multimodal root cause localization and failure typing.")
    p.add_argument("--config", help="TOML config file (default: $MVDIAG_CONFIG)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic labeled corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--faults-per-type", type=int, default=20)
    s.add_argument("--rps", type=float)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("extract", help="fit extractors and write alerts per failure window")
    s.add_argument("--telemetry", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--train-window", help="START,END of the clean fitting window (ms)")
    s.add_argument("--alert-window", type=int, help="window length after each injection (ms)")
    s.add_argument("--extractors", help="reuse a fitted extractor bundle")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("build-dataset", help="graphs and alert features per failure")
    s.add_argument("--telemetry", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--alerts", required=True)
    s.add_argument("--embedding", help="reuse a trained embedding table")
    s.add_argument("--embedding-out")
    s.add_argument("--types", help="comma-separated failure type labels (default: sorted from labels)")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_dataset)

    s = sub.add_parser("train", help="train the diagnosis model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--extractors")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-trace")
    s.set_defaults(fn=cmd_train)

    for name, fn, text in (("diagnose", cmd_diagnose, "diagnose one window"),
                           ("explain", cmd_explain, "modality attribution for one window")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--telemetry", required=True)
        s.add_argument("--window", required=True, help="START,END (ms)")
        s.add_argument("--extractors", required=True)
        s.add_argument("--embedding", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out")
        if name == "diagnose":
            s.add_argument("--no-timing", action="store_true", help="omit wall-clock timings")
        s.set_defaults(fn=fn)

    s = sub.add_parser("evaluate", help="ranking and classification metrics")
    s.add_argument("--predictions", help="JSONL with ranking/root_cause[/predicted_type/failure_type]")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.verbose:
            warnings.simplefilter("ignore")
        cfg = load_config(args.config, args.set)
        args.fn(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"mvdiag: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"mvdiag: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"mvdiag: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
