import numpy as np
import pytest
import torch

from mvdiag.dataset import FailureSample, InstanceGraph
from mvdiag.telemetry import Span


def random_tree_graph(n: int, rng: np.random.Generator) -> InstanceGraph:
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges |= {(u, v), (v, u)}
    return InstanceGraph([f"svc-{k}" for k in range(n)], sorted(edges))


def random_sample(n: int, rng: np.random.Generator, d: int = 16, n_types: int = 3,
                  roots: str = "ABC", sparse: float = 0.2) -> FailureSample:
    g = random_tree_graph(n, rng)
    feats = rng.random((n, 3, d)) * (rng.random((n, 3, 1)) >= sparse)
    root = int(rng.integers(n))
    # share instance names across samples so root-cause positives exist
    g.nodes[root] = "root-" + roots[int(rng.integers(len(roots)))]
    return FailureSample(g, feats, root, int(rng.integers(n_types)))


def make_span(trace, sid, parent, inst, op="op", start=0, dur=10, status="200"):
    return Span(trace, sid, parent, inst.rsplit("-", 1)[0], inst, op, start, dur, status)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Small simulated corpus plus a briefly trained pipeline, shared across tests."""
    import warnings

    from mvdiag.model import ModelConfig, TrainConfig
    from mvdiag.pipeline import PipelineConfig, run_offline
    from mvdiag.simgen import SimConfig, write_corpus
    from mvdiag.telemetry import TelemetryBundle, TimeWindow, load_labels

    root = tmp_path_factory.mktemp("tiny")
    manifest = write_corpus(root, SimConfig(seed=3, faults_per_type=3, warmup_ms=30 * 60_000))
    bundle = TelemetryBundle.from_dir(root)
    train_labels = load_labels(root / "labels_train.jsonl")
    cfg = PipelineConfig(model=ModelConfig(input_dim=32, hidden_dim=16, output_dim=8, head_hidden=16),
                         train=TrainConfig(max_epochs=30, batch_size=8), seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        art = run_offline(bundle, TimeWindow(*manifest["train_window"]), train_labels, cfg)
    return {"root": root, "manifest": manifest, "bundle": bundle, "cfg": cfg, "art": art,
            "train": train_labels, "test": load_labels(root / "labels_test.jsonl")}


ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; ``ok=None`` marks a skip."""
    def record(n: int, ok: bool | None, detail: str) -> bool | None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE[n] = (status, detail)
        print(f"criterion {n}: {status} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
