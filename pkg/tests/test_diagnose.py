import itertools
import json
import math

import numpy as np
import pytest

from mvdiag.diagnose import ChecksumMismatch, Diagnoser, diagnose, modality_shapley
from mvdiag.embedding import train_embedding
from mvdiag.pipeline import alert_window
from mvdiag.telemetry import TelemetryBundle

PLAYERS = ("metric", "trace", "log")


def permutation_shapley(v):
    # oracle: average marginal contribution over all 3! orders
    out = dict.fromkeys(PLAYERS, 0.0)
    orders = list(itertools.permutations(PLAYERS))
    for order in orders:
        s = frozenset()
        for p in order:
            out[p] += v(s | {p}) - v(s)
            s = s | {p}
    return {p: x / len(orders) for p, x in out.items()}


def random_game(rng):
    table = {frozenset(c): float(rng.normal()) for r in range(4) for c in itertools.combinations(PLAYERS, r)}
    return table.__getitem__


def test_additive_game_exact():
    c = {"metric": 0.25, "trace": -1.5, "log": 3.0}
    phi = modality_shapley(lambda s: sum(c[p] for p in s))
    assert phi == c


def test_symmetric_game_exact():
    assert modality_shapley(lambda s: float(len(s))) == {p: 1.0 for p in PLAYERS}


def test_random_games_efficiency_and_oracle(rng):
    for _ in range(500):
        v = random_game(rng)
        phi = modality_shapley(v)
        assert abs(sum(phi.values()) - (v(frozenset(PLAYERS)) - v(frozenset()))) < 1e-9
        want = permutation_shapley(v)
        assert all(abs(phi[p] - want[p]) < 1e-12 for p in PLAYERS)


def test_dummy_player_gets_zero(rng):
    base = random_game(rng)
    phi = modality_shapley(lambda s: base(s - {"log"}))
    assert abs(phi["log"]) < 1e-12


def window_for(run, lab):
    return run["bundle"].window(alert_window(lab, run["cfg"].alert_window_ms))


def test_report_invariants(tiny_run):
    art = tiny_run["art"]
    d = Diagnoser(art.extractor, art.table, art.checkpoint)
    for lab in tiny_run["test"]:
        rep = d.diagnose(window_for(tiny_run, lab))
        probs = [p for _, p in rep.ranking]
        assert math.isclose(sum(probs), 1.0, abs_tol=1e-9)
        assert probs == sorted(probs, reverse=True)
        assert math.isclose(sum(rep.class_probs), 1.0, abs_tol=1e-9)
        assert rep.failure_type[0] in art.checkpoint.type_labels
        assert set(rep.modality_shap) == {"rcl", "fti"}
        assert set(rep.timing_ms) >= {"alerts", "model", "total"}
        json.loads(rep.dumps())


def test_shap_efficiency_on_report(tiny_run):
    import torch
    art = tiny_run["art"]
    d = Diagnoser(art.extractor, art.table, art.checkpoint)
    lab = tiny_run["test"][0]
    rep = d.diagnose(window_for(tiny_run, lab))
    # v(all) - v(none) for the fti attribution, recomputed through the head
    from mvdiag.dataset import build_sample
    from mvdiag.model import collate
    w = window_for(tiny_run, lab)
    sample = build_sample(w.spans, art.extractor.extract(w), art.table)
    with torch.no_grad():
        _, graphs = d.model.encode(collate([sample]))
        full = torch.softmax(d.model.fti_head(torch.cat(graphs, 1)), 1)[0]
        empty = torch.softmax(d.model.fti_head(torch.zeros(1, sum(g.shape[1] for g in graphs),
                                                           dtype=torch.float64)), 1)[0]
    cls = art.checkpoint.type_labels.index(rep.failure_type[0])
    assert abs(sum(rep.modality_shap["fti"].values()) - (full[cls] - empty[cls]).item()) < 1e-9


def test_record_order_does_not_matter(tiny_run):
    art = tiny_run["art"]
    w = window_for(tiny_run, tiny_run["test"][1])
    shuffled = TelemetryBundle(w.metrics[::-1], w.spans[::-1], w.logs[::-1])
    a = diagnose(w, art.extractor, art.table, art.checkpoint)
    b = diagnose(shuffled, art.extractor, art.table, art.checkpoint)
    assert a.to_json(timing=False) == b.to_json(timing=False)


def test_alert_free_window_is_uniform(tiny_run):
    from conftest import make_span
    art = tiny_run["art"]
    # parentless spans give graph nodes but no invocation pairs, so no alerts at all
    spans = [make_span(f"t{i}", "a", None, inst, "GET /", i, 20) for i, inst in enumerate(["cart-1", "redis-0", "frontend-0"])]
    rep = Diagnoser(art.extractor, art.table, art.checkpoint).diagnose(TelemetryBundle([], spans, []))
    assert rep.n_alerts == 0
    probs = [p for _, p in rep.ranking]
    assert max(probs) - min(probs) < 1e-12
    assert [n for n, _ in rep.ranking] == ["cart-1", "frontend-0", "redis-0"]


def test_fingerprint_mismatch(tiny_run):
    art = tiny_run["art"]
    other = train_embedding([["x", "y"]], dim=art.table.dim)
    with pytest.raises(ChecksumMismatch):
        Diagnoser(art.extractor, other, art.checkpoint)
