import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_span
from mvdiag.alerts import (
    Alert,
    AlertExtractor,
    LogAlertSet,
    LogPayload,
    MetricPayload,
    NoInvocationPairs,
    TracePayload,
    UnknownPair,
    UnknownSeries,
    detect_log_alerts,
    detect_metric_alerts,
    detect_trace_alerts,
    fit_metric_baseline,
    fit_trace_detector,
    invocations,
    load_alerts,
    save_alerts,
    select_log_alert_keys,
)
from mvdiag.logparse import DrainParser
from mvdiag.telemetry import LogEntry, MetricSample, TelemetryBundle


def series(values, inst="cart-0", metric="cpu", t0=0):
    return [MetricSample(inst, metric, t0 + i, float(v)) for i, v in enumerate(values)]


# -- 3-sigma -----------------------------------------------------------------

def test_two_point_baseline():
    mu, sd, n = fit_metric_baseline(series([2, 4])).stats[("cart-0", "cpu")]
    assert (mu, sd, n) == (3.0, 1.0, 2)


def test_constant_baseline():
    mu, sd, _ = fit_metric_baseline(series([5, 5, 5])).stats[("cart-0", "cpu")]
    assert (mu, sd) == (5.0, 0.0)


def test_baseline_matches_two_pass_oracle(rng):
    v = rng.normal(3.0, 2.0, 500)
    mu, sd, _ = fit_metric_baseline(series(v)).stats[("cart-0", "cpu")]
    m = sum(v) / len(v)
    s = math.sqrt(sum((x - m) ** 2 for x in v) / len(v))
    assert abs(mu - m) < 1e-9 and abs(sd - s) < 1e-9


def test_single_sample_series_skipped():
    with pytest.warns(UserWarning):
        b = fit_metric_baseline(series([1.0]))
    assert b.stats == {}


def baseline_10_1():
    return fit_metric_baseline(series([9, 11]))  # mu=10, sd=1


def test_spike_up():
    (a,) = detect_metric_alerts(series([14]), baseline_10_1())
    assert a == Alert("cart-0", "metric", MetricPayload("cpu", "up"))


def test_within_band_no_alert():
    assert detect_metric_alerts(series([7.5, 10, 12.9]), baseline_10_1()) == []


def test_up_and_down_deduplicated():
    alerts = detect_metric_alerts(series([14, 5, 15, 4]), baseline_10_1())
    assert {a.payload.direction for a in alerts} == {"up", "down"}
    assert len(alerts) == 2


def test_zero_sigma_floor():
    b = fit_metric_baseline(series([5, 5, 5]))
    assert detect_metric_alerts(series([5]), b) == []
    assert len(detect_metric_alerts(series([5.001]), b)) == 1


def test_unknown_series_warns():
    with pytest.warns(UnknownSeries):
        assert detect_metric_alerts(series([1], inst="ghost-0"), baseline_10_1()) == []


# -- traces ------------------------------------------------------------------

def training_spans(rng, n=300, parent="frontend-0", child="product-1", op="GetProduct"):
    spans = []
    for i in range(n):
        spans.append(make_span(f"t{i}", "a", None, parent, "GET /", 1000 * i, 150))
        spans.append(make_span(f"t{i}", "b", "a", child, op, 1000 * i + 5, int(rng.normal(100, 5))))
    return spans


def test_invocations_need_parent_present():
    s = [make_span("t", "b", "a", "cart-0"), make_span("t", "c", "b", "redis-1", "GET")]
    assert [k for k, _ in invocations(s)] == [("cart-0", "redis-1", "GET")]


def test_status_500_alert_layout(rng):
    det = fit_trace_detector(training_spans(rng))
    window = [make_span("w", "a", None, "frontend-0", "GET /", 0, 150),
              make_span("w", "b", "a", "product-1", "GetProduct", 5, 100, "500")]
    (a,) = detect_trace_alerts(window, det)
    assert a == Alert("product-1", "trace", TracePayload("frontend-0", "GetProduct", "500"))
    assert a.token() == "T|frontend-0|GetProduct|500"


def test_median_duration_no_alert(rng):
    det = fit_trace_detector(training_spans(rng))
    window = [make_span("w", "a", None, "frontend-0", "GET /", 0, 150),
              make_span("w", "b", "a", "product-1", "GetProduct", 5, 100)]
    assert detect_trace_alerts(window, det) == []


def test_slow_call_alerts_across_refits():
    window = [make_span("w", "a", None, "frontend-0", "GET /", 0, 150),
              make_span("w", "b", "a", "product-1", "GetProduct", 5, 10_000)]
    hits = 0
    for seed in range(50):
        det = fit_trace_detector(training_spans(np.random.default_rng(seed)), seed=seed)
        hits += detect_trace_alerts(window, det) == [
            Alert("product-1", "trace", TracePayload("frontend-0", "GetProduct", "PD"))]
    assert hits >= 48


def test_unseen_pair_falls_back(rng):
    det = fit_trace_detector(training_spans(rng))
    window = [make_span("w", "a", None, "frontend-0", "GET /", 0, 150),
              make_span("w", "b", "a", "cart-1", "GetCart", 5, 10_000)]
    with pytest.warns(UnknownPair):
        (a,) = detect_trace_alerts(window, det)
    assert a.payload.abnormal_type == "PD" and a.reporter_id == "cart-1"


def test_no_pairs_raises():
    with pytest.raises(NoInvocationPairs):
        fit_trace_detector([make_span("t", "a", None, "cart-0")])


def test_empty_group_absent(rng):
    det = fit_trace_detector(training_spans(rng))
    assert set(det.forests) == {("frontend-0", "product-1", "GetProduct")}


# -- logs ----------------------------------------------------------------------

def test_bottom_half_by_count():
    s = select_log_alert_keys({0: 100, 1: 50, 2: 2, 3: 1}, {i: f"t{i}" for i in range(4)})
    assert s.alert_keys == {2, 3}


def test_error_template_always_included():
    freq = {0: 10**6, 1: 5, 2: 3}
    s = select_log_alert_keys(freq, {0: "disk Error on x", 1: "a", 2: "b"})
    assert 0 in s.alert_keys
    s = select_log_alert_keys(freq, {0: "fine", 1: "a", 2: "b"}, error_level_keys=[0])
    assert 0 in s.alert_keys


def brute_force_keys(freq, templates, k, keywords, error_level):
    rule1 = {t for t in freq if t in error_level or any(w in templates[t] for w in keywords)}
    n_low = math.ceil(k * len(freq))
    # rarest: every id with fewer than n_low ids strictly before it in (count, id) order
    rule2 = {t for t in freq
             if sum(1 for u in freq if (freq[u], u) < (freq[t], t)) < n_low}
    return rule1 | rule2


@settings(max_examples=200, deadline=None)
@given(
    st.dictionaries(st.integers(0, 60), st.integers(1, 30), min_size=1, max_size=25),
    st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0]),
    st.data(),
)
def test_rule_union_matches_brute_force(freq, k, data):
    words = ["ok", "fail", "ERROR", "read", "Exception"]
    templates = {t: " ".join(data.draw(st.lists(st.sampled_from(words), min_size=1, max_size=3)))
                 for t in freq}
    error_level = data.draw(st.sets(st.sampled_from(sorted(freq))))
    kw = ["ERROR", "fail", "Exception"]
    got = select_log_alert_keys(freq, templates, k, kw, error_level)
    assert got.alert_keys == brute_force_keys(freq, templates, k, kw, error_level)


def test_log_alert_validation():
    with pytest.raises(ValueError):
        select_log_alert_keys({}, {})
    with pytest.raises(ValueError):
        select_log_alert_keys({1: 1}, {1: "x"}, low_freq_fraction=0.0)


def parser_with(messages):
    p = DrainParser()
    ids = [p.parse(m) for m in messages]
    return p, ids


def test_repeated_key_one_alert():
    p, (tid, _) = parser_with(["tcp: i/o timeout to redis", "request served"])
    s = LogAlertSet(frozenset({tid}))
    logs = [LogEntry("product-1", i, "ERROR", "tcp: i/o timeout to redis") for i in range(7)]
    assert detect_log_alerts(logs, p, s) == [Alert("product-1", "log", LogPayload(tid))]


def test_non_alert_keys_empty():
    p, (tid, other) = parser_with(["tcp: i/o timeout to redis", "request served"])
    s = LogAlertSet(frozenset({tid}))
    assert detect_log_alerts([LogEntry("a", 0, "INFO", "request served")], p, s) == []


def test_mixed_window_against_scan(rng):
    msgs = ["request served in 5 ms", "cache miss for key 7", "tcp: i/o timeout to redis",
            "checksum mismatch on frame 3", "pool exhausted"]
    p, ids = parser_with(msgs)
    s = LogAlertSet(frozenset(ids[2:]))
    logs = [LogEntry(f"svc-{int(rng.integers(3))}", i, "INFO", msgs[int(rng.integers(5))]) for i in range(200)]
    expected = {(e.instance_id, p.match(e.message)) for e in logs if p.match(e.message) in s.alert_keys}
    got = {(a.reporter_id, a.payload.log_key) for a in detect_log_alerts(logs, p, s)}
    assert got == expected
    assert {a for a, _ in got} <= {e.instance_id for e in logs}


# -- records and bundle ----------------------------------------------------

def test_alert_payload_type_checked():
    with pytest.raises(TypeError):
        Alert("a", "metric", LogPayload(1))
    with pytest.raises(ValueError):
        Alert("a", "events", LogPayload(1))


def test_alert_file_round_trip(tmp_path):
    alerts = [Alert("a", "metric", MetricPayload("cpu", "up")),
              Alert("b", "trace", TracePayload("a", "op", "PD")),
              Alert("b", "log", LogPayload(3))]
    save_alerts(tmp_path / "a.jsonl", alerts)
    assert load_alerts(tmp_path / "a.jsonl") == alerts


def small_bundle(rng):
    spans = training_spans(rng, 100)
    metrics = series(rng.normal(0.3, 0.02, 50), "product-1", "cpu_usage")
    logs = [LogEntry("product-1", i, "INFO", f"request served in {i} ms") for i in range(50)]
    logs.append(LogEntry("product-1", 99, "ERROR", "upstream call failed"))
    return TelemetryBundle(metrics, spans, logs)


def test_extractor_round_trip_and_fingerprint(tmp_path, rng):
    ex = AlertExtractor.fit(small_bundle(rng), seed=4)
    ex.save(tmp_path / "ex.json")
    again = AlertExtractor.load(tmp_path / "ex.json")
    assert again.fingerprint() == ex.fingerprint()
    window = TelemetryBundle(
        series([0.9], "product-1", "cpu_usage"),
        [make_span("w", "a", None, "frontend-0", "GET /", 0, 150),
         make_span("w", "b", "a", "product-1", "GetProduct", 5, 100, "503")],
        [LogEntry("product-1", 0, "ERROR", "upstream call failed")],
    )
    got = ex.extract(window)
    assert got == again.extract(window)
    assert {a.modality for a in got} == {"metric", "trace", "log"}
    assert all(a.reporter_id == "product-1" for a in got)


def test_extract_is_order_independent(rng):
    ex = AlertExtractor.fit(small_bundle(rng))
    b = small_bundle(np.random.default_rng(77))
    shuffled = TelemetryBundle(b.metrics[::-1], b.spans[::-1], b.logs[::-1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert ex.extract(b) == ex.extract(shuffled)
