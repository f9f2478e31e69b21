"""End-to-end acceptance suite; each test records one pass/fail line."""

import dataclasses
import itertools
import math
import os
import time
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import random_sample, random_tree_graph
from mvdiag.alerts import detect_metric_alerts, fit_metric_baseline, select_log_alert_keys
from mvdiag.augment import augment
from mvdiag.dataset import FailureSample
from mvdiag.diagnose import Diagnoser, modality_shapley
from mvdiag.evalkit import FtiResult, RclResult, avg_at_k, hr_at_k, mrr_at_k, prf1
from mvdiag.iforest import IsolationForest
from mvdiag.losses import cross_modal_loss, fti_loss, rcl_loss, task_oriented_loss_single, total_loss
from mvdiag.model import DiagnosisModel, ModelConfig, collate, grad_check, loss_components
from mvdiag.pipeline import PipelineConfig, evaluate_online, run_offline
from mvdiag.simgen import SimConfig, write_corpus
from mvdiag.telemetry import MetricSample, TelemetryBundle, TimeWindow, load_labels

pytestmark = pytest.mark.acceptance
T = torch.float64


# 1 ---------------------------------------------------------------------------

def test_gradient_fidelity(criterion):
    rng = np.random.default_rng(2024)
    names = ["task-oriented", "cross-modal", "rcl", "fti", "total", "encoder"]
    worst = dict.fromkeys(names, 0.0)
    t0 = time.perf_counter()
    for trial in range(20):
        samples = [random_sample(int(rng.integers(2, 7)), rng, d=128) for _ in range(int(rng.integers(2, 5)))]
        batch = collate(samples)
        torch.manual_seed(trial)
        model = DiagnosisModel(ModelConfig())
        with torch.no_grad():
            model.rho.copy_(torch.tensor(rng.normal(0, 0.5, 4)))
        params = list(model.parameters())
        probes = [(i, int(rng.integers(p.numel()))) for i, p in enumerate(params) for _ in range(3)]

        def component(k):
            return lambda: loss_components(model, model(batch), batch)[0][k]

        fns = {
            "rcl": component(0), "fti": component(1), "task-oriented": component(2), "cross-modal": component(3),
            "total": lambda: loss_components(model, model(batch), batch)[1],
        }
        for name, fn in fns.items():
            worst[name] = max(worst[name], grad_check(fn, params, probes))

        # encoder stack alone, including its input features
        enc = model.encoders["trace"]
        x = batch.x[:, 1, :].clone().requires_grad_()
        proj = torch.tensor(rng.normal(size=(32,)), dtype=T)
        enc_params = list(enc.parameters()) + [x]
        enc_probes = [(i, int(rng.integers(p.numel()))) for i, p in enumerate(enc_params[:-1]) for _ in range(6)]
        # inputs are probed on alert-carrying nodes only: at an all-zero node whose
        # neighbours are also zero the normalized output jumps, so no derivative exists
        live = torch.nonzero(x.detach().abs().sum(1) > 0).flatten().tolist()
        d = x.shape[1]
        enc_probes += [(len(enc_params) - 1, int(rng.choice(live)) * d + int(rng.integers(d))) for _ in range(6)]

        def enc_fn():
            h, pooled = enc(x, batch)
            return (h @ proj).pow(2).sum() + (pooled @ proj).sum()

        worst["encoder"] = max(worst["encoder"], grad_check(enc_fn, enc_params, enc_probes))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    criterion(1, ok, f"max rel err {detail}; {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_loss_identities(criterion):
    rng = np.random.default_rng(7)
    F = torch.tensor(rng.normal(size=(6, 8)), dtype=T)
    checks = {
        "to_same_label": abs(task_oriented_loss_single(F, ["A"] * 6, 0.3).item()),
        "cm_n1": abs(cross_modal_loss(F[:1], F[1:2], F[2:3], 0.3).item()),
        "fti_uniform": abs(fti_loss(torch.zeros(5, 6, dtype=T), torch.tensor([0, 1, 2, 3, 5])).item() - math.log(6)),
        "rcl_pair": abs(rcl_loss(torch.tensor([1.3, 1.3], dtype=T), torch.tensor([0, 0]), torch.tensor([0]), 1).item()
                        - math.log(2)),
    }
    comps = torch.tensor(rng.uniform(0, 5, 4), dtype=T)
    omega = 0.1
    scaled = comps * torch.tensor([1, 1, omega, omega], dtype=T)
    checks["total_unit_theta"] = abs(total_loss(comps, torch.zeros(4, dtype=T), omega).item()
                                     - (0.5 * scaled.sum().item() + 4 * math.log(2)))
    ok = max(checks.values()) <= 1e-9
    criterion(2, ok, ", ".join(f"{k}={v:.1e}" for k, v in checks.items()))
    assert ok


# 3 ---------------------------------------------------------------------------

def exact_drop(p: str, n: int) -> int:
    return math.floor(Fraction(p) * n)


def test_augmentation_law(criterion):
    p = "0.2"
    rng = np.random.default_rng(99)
    failures = []
    # 1000 augmentations of independent random graphs
    for i in range(1000):
        n = int(rng.integers(4, 41))
        root = int(rng.integers(n))
        s = FailureSample(random_tree_graph(n, rng), np.zeros((n, 3, 2)), root, 0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = augment(s, float(p), np.random.default_rng(i))
        if s.root_instance not in out.nodes or out.root_instance != s.root_instance:
            failures.append(f"root lost at draw {i}")
        if len(out.nodes) != n - exact_drop(p, n):
            failures.append(f"|V'|={len(out.nodes)} for |V|={n}")
    # per-node drop frequency on graphs spanning the size range, 1000 draws each
    worst = 0.0
    for n in (5, 10, 17, 26, 40):
        root = int(rng.integers(n))
        s = FailureSample(random_tree_graph(n, rng), np.zeros((n, 3, 2)), root, 0)
        counts = np.zeros(n)
        draw_rng = np.random.default_rng(n)
        for _ in range(1000):
            kept = set(augment(s, float(p), draw_rng).nodes)
            counts += [name not in kept for name in s.nodes]
        expected = exact_drop(p, n) / (n - 1)
        if counts[root]:
            failures.append(f"root dropped on n={n}")
        worst = max(worst, float(np.max(np.abs(np.delete(counts, root) / 1000 - expected))))
    ok = not failures and worst <= 0.05
    criterion(3, ok, f"{len(failures)} violations; max |freq - m/(|V|-1)| = {worst:.3f}")
    assert ok, failures[:5]


# 4 ---------------------------------------------------------------------------

def brute_rank(r):
    for i, x in enumerate(r.ranking):
        if x == r.truth:
            return i + 1
    return None


def test_metric_oracles(criterion):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        rcl = []
        for _ in range(n):
            names = [f"n{j}" for j in rng.permutation(12)[: int(rng.integers(1, 10))]]
            rcl.append(RclResult(tuple(names), f"n{int(rng.integers(12))}"))
        ranks = [brute_rank(r) for r in rcl]
        for k in (1, 2, 3, 5):
            hr = [sum(1 for q in ranks if q is not None and q <= j) / n for j in range(1, k + 1)]
            mrr = sum(1 / q for q in ranks if q is not None and q <= k) / n
            mismatches += (hr_at_k(rcl, k), avg_at_k(rcl, k), mrr_at_k(rcl, k)) != (hr[-1], sum(hr) / k, mrr)
        fti = [FtiResult(int(rng.integers(5)), int(rng.integers(5))) for _ in range(n)]
        classes = sorted({f.truth for f in fti} | {f.predicted for f in fti})
        per = []
        for c in classes:
            tp = sum(f.truth == c and f.predicted == c for f in fti)
            fp = sum(f.truth != c and f.predicted == c for f in fti)
            fn = sum(f.truth == c and f.predicted != c for f in fti)
            per.append((tp / (tp + fp) if tp + fp else 0.0, tp / (tp + fn) if tp + fn else 0.0,
                        2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0))
        want = tuple(sum(v[i] for v in per) / len(per) for i in range(3))
        mismatches += prf1(fti, "macro") != want
    ok = mismatches == 0
    criterion(4, ok, f"{mismatches} mismatches over 1000 random result sets")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_shapley_axioms(criterion):
    players = ("metric", "trace", "log")
    coalitions = [frozenset(c) for r in range(4) for c in itertools.combinations(players, r)]
    rng = np.random.default_rng(5)
    eff = 0.0
    for _ in range(1000):
        v = dict(zip(coalitions, rng.normal(size=8) * 10))
        phi = modality_shapley(v.__getitem__)
        eff = max(eff, abs(sum(phi.values()) - (v[frozenset(players)] - v[frozenset()])))
    c = {"metric": 0.75, "trace": -2.0, "log": 1.25}
    additive = modality_shapley(lambda s: sum(c[p] for p in s)) == c
    symmetric = modality_shapley(lambda s: float(len(s))) == dict.fromkeys(players, 1.0)
    ok = eff < 1e-9 and additive and symmetric
    criterion(5, ok, f"efficiency err {eff:.1e}; additive exact={additive}; symmetric exact={symmetric}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_extractor_correctness(criterion):
    tail = math.erfc(3 / math.sqrt(2))
    misses = false_alerts = checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mu, sigma = rng.uniform(-5, 5), rng.uniform(0.1, 3)
        train = [MetricSample("svc-0", "cpu", i, float(v)) for i, v in enumerate(rng.normal(mu, sigma, 2000))]
        base = fit_metric_baseline(train)
        clean = rng.normal(mu, sigma, 200)
        false_alerts += sum(bool(detect_metric_alerts([MetricSample("svc-0", "cpu", 0, float(v))], base))
                            for v in clean)
        checked += len(clean)
        window = [MetricSample("svc-0", "cpu", i, float(v)) for i, v in enumerate(clean[:20])]
        window.append(MetricSample("svc-0", "cpu", 99, float(mu + 5 * sigma)))
        misses += not any(a.payload.direction == "up" for a in detect_metric_alerts(window, base))
    fp_rate = false_alerts / checked

    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        d = rng.normal(100.0, 5.0, 255)
        X = np.column_stack([np.append(d, 10_000.0), np.ones(256)])
        forest = IsolationForest().fit(X, rng)
        s = forest.score(np.column_stack([X[:, 0], X[:, 1]]))
        wins += bool(np.all(s[-1] > s[:-1]))

    rule_mismatch = 0
    rng = np.random.default_rng(6)
    words = ["ok", "ERROR", "fail", "served", "timeout", "Exception"]
    for _ in range(500):
        n = int(rng.integers(1, 30))
        ids = rng.choice(200, n, replace=False).tolist()
        freq = {i: int(rng.integers(1, 50)) for i in ids}
        templates = {i: " ".join(rng.choice(words, int(rng.integers(1, 4)))) for i in ids}
        k = float(rng.choice([0.1, 0.3, 0.5, 0.9]))
        error_level = {i for i in ids if rng.random() < 0.1}
        got = select_log_alert_keys(freq, templates, k, ["ERROR", "fail", "Exception"], error_level).alert_keys
        rule1 = {i for i in ids if i in error_level or any(w in templates[i] for w in ["ERROR", "fail", "Exception"])}
        ordered = sorted(ids, key=lambda i: (freq[i], i))
        rule2 = set(ordered[: math.ceil(k * n)])
        rule_mismatch += got != rule1 | rule2

    ok = misses == 0 and fp_rate <= 4 * tail and wins >= 48 and rule_mismatch == 0
    criterion(6, ok, f"3-sigma misses={misses}, false-alert rate={fp_rate:.4f} (limit {4 * tail:.4f}); "
                     f"IForest outlier top in {wins}/50; log-rule mismatches={rule_mismatch}/500")
    assert ok


# 7 and 8 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = write_corpus(root, SimConfig(seed=0))
    return {
        "bundle": TelemetryBundle.from_dir(root),
        "train": load_labels(root / "labels_train.jsonl"),
        "test": load_labels(root / "labels_test.jsonl"),
        "window": TimeWindow(*manifest["train_window"]),
        "results": {},
    }


def run_variant(desk, cfg: PipelineConfig) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        art = run_offline(desk["bundle"], desk["window"], desk["train"], cfg)
        res, _ = evaluate_online(desk["bundle"], desk["test"], Diagnoser(art.extractor, art.table, art.checkpoint),
                                 cfg.alert_window_ms)
    res["offline_s"] = art.timings_s["total"]
    return res


def full_result(desk) -> dict:
    if "full" not in desk["results"]:
        desk["results"]["full"] = run_variant(desk, PipelineConfig())
    return desk["results"]["full"]


@pytest.mark.slow
def test_end_to_end_desk_run(criterion, desk):
    r = full_result(desk)
    ok = (r["HR@1"] >= 0.80 and r["Avg@3"] >= 0.85 and r["F1"] >= 0.80
          and r["offline_s"] < 600 and r["online_s_max"] < 5)
    criterion(7, ok, f"HR@1={r['HR@1']:.3f} Avg@3={r['Avg@3']:.3f} macro-F1={r['F1']:.3f} "
                     f"offline={r['offline_s']:.1f}s online max={r['online_s_max'] * 1e3:.1f}ms "
                     f"(n_test={r['n_rcl']})")
    assert ok


@pytest.mark.slow
def test_ablation_direction(criterion, desk):
    full = full_result(desk)["HR@1"]
    base = PipelineConfig()
    variants = {
        "no-augmentation": dataclasses.replace(base, use_augmentation=False),
        "no-task-oriented": dataclasses.replace(base, model=ModelConfig(task_oriented=False)),
        "no-cross-modal": dataclasses.replace(base, model=ModelConfig(cross_modal=False)),
    }
    hr = {name: run_variant(desk, cfg)["HR@1"] for name, cfg in variants.items()}
    ok = all(v - full <= 0.02 + 1e-12 for v in hr.values())
    criterion(8, ok, f"full HR@1={full:.3f}; " + ", ".join(f"{k}={v:.3f}" for k, v in hr.items()))
    assert ok


# 9 ---------------------------------------------------------------------------

GAIA_ENV = "MVDIAG_GAIA_DIR"


def test_gaia_reproduction(criterion):
    path = os.environ.get(GAIA_ENV)
    if not path or not Path(path, "manifest.json").is_file():
        criterion(9, None, f"dataset not mounted (set {GAIA_ENV} to a converted corpus directory)")
        pytest.skip("GAIA-derived corpus not available")
    import json
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    data = {
        "bundle": TelemetryBundle.from_dir(root),
        "train": load_labels(root / "labels_train.jsonl"),
        "test": load_labels(root / "labels_test.jsonl"),
        "window": TimeWindow(*manifest["train_window"]),
    }
    r = run_variant(data, PipelineConfig(alert_window_ms=int(manifest.get("alert_window_ms", 60_000))))
    ok = abs(r["HR@1"] - 0.759) <= 0.10 and abs(r["F1"] - 0.936) <= 0.10
    criterion(9, ok, f"HR@1={r['HR@1']:.3f} (target 0.759±0.10), F1={r['F1']:.3f} (target 0.936±0.10)")
    assert ok
