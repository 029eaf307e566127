"""Preprocessing oracles: scaling, percentiles, alerts, tiling, leakage."""

import numpy as np
import pytest

from microdiag.preprocess import (
    BUCKET_MS,
    EMPTY_TOKEN,
    TRACE_SEGMENT_STATS,
    TRACE_STAT_NAMES,
    UNK_TOKEN,
    apply_transforms,
    compress_metrics,
    fit_transforms,
    plan_windows,
    preprocess_stream,
    standardize_metrics,
    three_sigma_alerts,
    trace_features,
    window_label,
    windows_from_bytes,
    windows_to_bytes,
)
from microdiag.prng import prng_new
from microdiag.types import (
    AlertDirection,
    AlertSource,
    FaultSpec,
    FaultType,
    Span,
    TelemetryStream,
)


class TestStandardize:
    def test_hand_values(self):
        # train {0, 2}: mu=1, population sigma=1; the value 3 scores z=2.0
        z, stats = standardize_metrics({"cpu": np.array([0.0, 2.0, 3.0])}, train_len=2)
        assert stats["cpu"] == (1.0, 1.0)
        assert z["cpu"].tolist() == [-1.0, 1.0, 2.0]

    def test_constant_channel_maps_to_zeros(self):
        z, stats = standardize_metrics({"mem": np.array([5.0, 5.0, 9.0])}, train_len=2)
        assert stats["mem"] == (5.0, 0.0)
        assert z["mem"].tolist() == [0.0, 0.0, 0.0]

    def test_population_sigma_convention(self):
        z, stats = standardize_metrics({"x": np.array([1.0, 2.0, 3.0, 4.0])}, train_len=4)
        assert stats["x"][1] == pytest.approx(np.sqrt(1.25))  # /n, not /(n-1)

    def test_guards(self):
        with pytest.raises(ValueError, match="train_len"):
            standardize_metrics({"x": np.zeros(3)}, train_len=0)
        with pytest.raises(ValueError, match="no training samples"):
            standardize_metrics({"x": np.array([])}, train_len=2)


class TestThreeSigma:
    def test_single_high_alert(self):
        events = three_sigma_alerts(np.array([0.0, 3.5, 0.0]), 0.0, 1.0, 0, 1000,
                                    "a", AlertSource.METRIC_CHANNEL, "metric:cpu")
        assert len(events) == 1
        ev = events[0]
        assert ev.t_ms == 1000 and ev.direction is AlertDirection.HIGH
        assert ev.token == "metric:cpu:HIGH"

    def test_within_band_is_silent(self):
        vals = np.array([2.9, -2.9, 3.0, -3.0])  # exactly 3 sigma is not an alert
        assert three_sigma_alerts(vals, 0.0, 1.0, 0, 1000, "a",
                                  AlertSource.METRIC_CHANNEL, "m") == []

    def test_run_collapses_to_one_event(self):
        vals = np.array([0.0, 4.0, 4.0, 4.0, 4.0, 4.0, 0.0])
        events = three_sigma_alerts(vals, 0.0, 1.0, 0, 1000, "a",
                                    AlertSource.METRIC_CHANNEL, "m")
        assert len(events) == 1 and events[0].t_ms == 1000

    def test_direction_change_restarts_run(self):
        vals = np.array([4.0, -4.0, 4.0])
        events = three_sigma_alerts(vals, 0.0, 1.0, 0, 500, "a",
                                    AlertSource.METRIC_CHANNEL, "m")
        assert [e.direction.value for e in events] == ["HIGH", "LOW", "HIGH"]
        assert [e.t_ms for e in events] == [0, 500, 1000]

    def test_low_alert_and_custom_stats(self):
        events = three_sigma_alerts(np.array([10.0, 1.0]), 10.0, 2.0, 0, 1000, "a",
                                    AlertSource.TEMPLATE_RATE, "template:3")
        assert len(events) == 1 and events[0].direction is AlertDirection.LOW


class TestTraceFeatures:
    def test_single_span_hand_example(self):
        spans = [Span(500, "a", "b", 10.0, "ok")]
        stats, graph = trace_features(spans, 1000, ("a", "b"), 0, 3000)
        assert graph.node_names == ("a", "b") and graph.edges == ((0, 1),)
        a, b = stats["a"], stats["b"]
        names = list(TRACE_STAT_NAMES)
        assert a[names.index("lat_mean"), 0] == 10.0
        assert a[names.index("lat_p95"), 0] == 10.0
        assert a[names.index("count"), 0] == 1.0
        # error rate belongs to the callee (a failed request is the server's
        # fault); the caller's err row stays at the zero encoding
        assert np.all(a[names.index("err_rate")] == 0.0)
        assert b[names.index("err_rate"), 0] == 0.0
        # empty buckets are encoded as 0 with count 0
        assert np.all(a[:, 1:] == 0.0) and np.all(b[:, 1:] == 0.0)

    def test_percentile_type7_hand_value(self):
        spans = [Span(t, "a", "b", lat, "ok")
                 for t, lat in ((0, 10.0), (1, 20.0), (2, 30.0), (3, 40.0))]
        stats, _ = trace_features(spans, 1000, ("a", "b"), 0, 1000)
        names = list(TRACE_STAT_NAMES)
        assert stats["a"][names.index("lat_mean"), 0] == 25.0
        # linear interpolation between order statistics: 30 + 0.85 * 10
        assert stats["a"][names.index("lat_p95"), 0] == pytest.approx(38.5)

    def test_error_attribution_to_callee(self):
        spans = [
            Span(0, "a", "b", 5.0, "error"),
            Span(1, "a", "b", 5.0, "ok"),
            Span(2, "c", "b", 5.0, "error"),
            Span(3, "b", "c", 5.0, "ok"),
        ]
        stats, _ = trace_features(spans, 1000, ("a", "b", "c"), 0, 1000)
        names = list(TRACE_STAT_NAMES)
        err = names.index("err_rate")
        assert stats["b"][err, 0] == pytest.approx(2 / 3)  # b served 3, failed 2
        assert stats["c"][err, 0] == 0.0
        assert stats["a"][err, 0] == 0.0  # a serves nothing
        assert stats["b"][names.index("count"), 0] == 1.0  # one outgoing span

    def test_duplicate_spans_same_graph(self):
        spans = [Span(0, "a", "b", 5.0, "ok")] * 3
        _, g1 = trace_features(spans, 1000, ("a", "b"), 0, 1000)
        _, g2 = trace_features(spans[:1], 1000, ("a", "b"), 0, 1000)
        assert g1 == g2

    def test_guards(self):
        with pytest.raises(ValueError, match="at least one span"):
            trace_features([], 1000, ("a",), 0, 1000)
        with pytest.raises(ValueError, match="outside range"):
            trace_features([Span(5000, "a", "b", 1.0, "ok")], 1000, ("a", "b"), 0, 1000)


class TestCompressMetrics:
    def test_k_equals_all_is_identity(self):
        series = {ch: np.random.default_rng(0).normal(size=50) for ch in ("a", "b", "c")}
        assert compress_metrics(series, 3, 50, prng_new(0)) == ["a", "b", "c"]

    def test_selects_k_representatives_deterministically(self):
        rng = np.random.default_rng(1)
        base1, base2 = rng.normal(size=200), rng.normal(size=200)
        series = {
            "a1": base1, "a2": base1 + 0.01 * rng.normal(size=200),
            "b1": base2, "b2": base2 + 0.01 * rng.normal(size=200),
        }
        picked = compress_metrics(series, 2, 200, prng_new(5))
        assert len(picked) == 2
        assert picked == compress_metrics(series, 2, 200, prng_new(5))
        # one representative per correlated family
        assert {ch[0] for ch in picked} == {"a", "b"}


class TestPlanWindows:
    def test_hundred_window_tiling_oracle(self):
        # 100 non-overlapping windows, 60/20/20: boundaries at indices 60 and
        # 80; one window on each side of each boundary is guarded away,
        # leaving {59, 18, 19}
        w = 60_000
        plan = plan_windows(100 * w, w, w)
        assert len(plan.starts) == 100
        assert (len(plan.train_idx), len(plan.valid_idx), len(plan.test_idx)) == (59, 18, 19)
        assert plan.train_idx[-1] == 58 and plan.valid_idx[0] == 61
        assert plan.valid_idx[-1] == 78 and plan.test_idx[0] == 81
        assert plan.boundary1_ms == 60 * w and plan.boundary2_ms == 80 * w
        assert plan.train_end_ms == plan.boundary1_ms

    def test_local_preset_tiling(self):
        plan = plan_windows(10_800_000, 30_000, 30_000)
        sizes = (len(plan.train_idx), len(plan.valid_idx), len(plan.test_idx))
        assert sizes == (215, 70, 71)

    def test_guard_zone_property_on_randomized_tilings(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            w = int(rng.integers(10, 121)) * 1000
            s = int(rng.integers(max(1, w // 3000), w // 1000 + 1)) * 1000
            duration = w * int(rng.integers(70, 201))
            plan = plan_windows(duration, w, s)
            for b in (plan.boundary1_ms, plan.boundary2_ms):
                for idx in plan.train_idx + plan.valid_idx + plan.test_idx:
                    st = plan.starts[idx]
                    assert not (st < b + w and st + w > b - w), (w, s, duration, st, b)
            # one window length of clearance on each side of each boundary
            assert max(plan.starts[i] + w for i in plan.train_idx) <= plan.boundary1_ms - w
            assert min(plan.starts[i] for i in plan.valid_idx) >= plan.boundary1_ms + w
            assert max(plan.starts[i] + w for i in plan.valid_idx) <= plan.boundary2_ms - w
            assert min(plan.starts[i] for i in plan.test_idx) >= plan.boundary2_ms + w

    def test_stride_above_window_rejected(self):
        with pytest.raises(ValueError, match="stride"):
            plan_windows(600_000, 30_000, 60_000)

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValueError, match="fractions"):
            plan_windows(600_000, 30_000, 30_000, fractions=(0.5, 0.5, 0.5))

    def test_too_few_windows_rejected(self):
        with pytest.raises(ValueError, match="too few"):
            plan_windows(30_000, 30_000, 30_000)

    def test_guards_can_empty_a_split(self):
        # three windows tile [0, 90s): the boundary guards consume all of them
        with pytest.raises(ValueError, match="after guards"):
            plan_windows(90_000, 30_000, 30_000)


class TestWindowLabel:
    FAULTS = [FaultSpec(2, FaultType.CRASH, 70_000, 30_000, 0.9, 0.0)]

    def test_fault_start_inside_window(self):
        assert window_label(60_000, 120_000, self.FAULTS) is self.FAULTS[0]

    def test_no_overlap_is_clean(self):
        assert window_label(0, 60_000, self.FAULTS) is None

    def test_half_overlap_without_start(self):
        # a long fault [70, 190) qualifies windows it covers half of even
        # though its start lies outside them
        long = [FaultSpec(0, FaultType.NET_DELAY, 70_000, 120_000, 0.9, 0.0)]
        assert window_label(100_000, 160_000, long) is long[0]
        assert window_label(160_000, 220_000, long) is long[0]  # exactly half
        assert window_label(161_000, 221_000, long) is None  # 29 of 60 s

    def test_two_matching_faults_violate_gap_contract(self):
        faults = [
            FaultSpec(0, FaultType.CRASH, 10_000, 40_000, 0.9, 0.0),
            FaultSpec(1, FaultType.CRASH, 50_000, 40_000, 0.9, 0.0),
        ]
        with pytest.raises(ValueError, match="matches 2 faults"):
            window_label(0, 60_000, faults)


def quiet_stream(duration_s=240, nodes=("a", "b", "c")) -> TelemetryStream:
    """Flat deterministic telemetry covering every node and edge."""
    chans = ("cpu", "qps")
    metrics = {
        n: {ch: [(t * 1000, 20.0 + i + (t % 3)) for t in range(duration_s)]
            for i, ch in enumerate(chans)}
        for n in nodes
    }
    logs = {
        n: [(t * 1000 + 10, f"job {t} finished ok") for t in range(0, duration_s, 2)]
        for n in nodes
    }
    spans = []
    for t in range(duration_s):
        spans.append(Span(t * 1000 + 100, "a", "b", 10.0 + (t % 5), "ok"))
        spans.append(Span(t * 1000 + 200, "b", "c", 20.0 + (t % 7), "ok"))
        spans.append(Span(t * 1000 + 300, "c", "a", 15.0, "ok"))
    return TelemetryStream(nodes=nodes, metrics=metrics, logs=logs, spans=spans)


class TestTransforms:
    def test_leakage_guard_byte_identical(self):
        stream = quiet_stream()
        train_end = 120_000
        tf1 = fit_transforms(stream, train_end, prng_new(3).child("preprocess"))

        mutated = quiet_stream()
        for node in mutated.nodes:
            for ch, points in mutated.metrics[node].items():
                mutated.metrics[node][ch] = [
                    (t, v + 500.0) if t >= train_end else (t, v) for t, v in points
                ]
            mutated.logs[node] = [
                rec for rec in mutated.logs[node] if rec[0] < train_end
            ] + [(train_end + 5, "totally new failure mode appeared")] * 30
        mutated.spans = [
            sp if sp.t_ms < train_end else sp._replace(latency_ms=999.0, status="error")
            for sp in mutated.spans
        ]
        tf2 = fit_transforms(mutated, train_end, prng_new(3).child("preprocess"))
        assert tf1.to_json() == tf2.to_json()
        assert tf1.table.to_json() == tf2.table.to_json()

    def test_fit_reads_nothing_past_train_end(self):
        stream = quiet_stream()
        truncated = quiet_stream(duration_s=120)
        a = fit_transforms(stream, 120_000, prng_new(1).child("p"))
        b = fit_transforms(truncated, 120_000, prng_new(1).child("p"))
        assert a.to_json() == b.to_json()

    def test_apply_shapes_and_trace_segment(self):
        stream = quiet_stream()
        tf = fit_transforms(stream, 120_000, prng_new(1).child("p"))
        metric_z, log_counts, trace_z, alerts, duration_ms = apply_transforms(stream, tf)
        n, T = len(stream.nodes), duration_ms // BUCKET_MS
        assert metric_z.shape == (n, len(tf.selected_channels), T)
        assert log_counts.shape == (n, tf.table.n_templates + 1, T)
        # model windows carry latency + error rows only; count informs alerts
        assert trace_z.shape == (n, len(TRACE_SEGMENT_STATS), T)
        assert set(alerts) == set(stream.nodes)
        assert {EMPTY_TOKEN: 0, UNK_TOKEN: 1}.items() <= tf.alert_vocab.items()
        ids = sorted(tf.alert_vocab.values())
        assert ids == list(range(len(ids)))

    def test_trace_z_zero_in_span_free_buckets(self):
        # node c emits no spans in odd buckets here; its latency z must sit
        # exactly at 0 there rather than at a huge negative outlier
        nodes = ("a", "b", "c")
        duration_s = 240
        metrics = {
            n: {"cpu": [(t * 1000, 20.0 + (t % 3)) for t in range(duration_s)]}
            for n in nodes
        }
        logs = {n: [(0, "boot ok")] for n in nodes}
        spans = []
        for t in range(duration_s):
            spans.append(Span(t * 1000, "a", "b", 10.0 + (t % 5), "ok"))
            if t % 2 == 0:
                spans.append(Span(t * 1000 + 1, "c", "a", 30.0 + (t % 4), "ok"))
        stream = TelemetryStream(nodes=nodes, metrics=metrics, logs=logs, spans=spans)
        tf = fit_transforms(stream, 120_000, prng_new(1).child("p"))
        _, _, trace_z, _, _ = apply_transforms(stream, tf)
        ci = nodes.index("c")
        lat_rows = [TRACE_SEGMENT_STATS.index(s) for s in ("lat_mean", "lat_p95")]
        odd = np.arange(1, duration_s, 2)
        even = np.arange(0, duration_s, 2)
        for row in lat_rows:
            assert np.all(trace_z[ci, row, odd] == 0.0)
            assert np.any(trace_z[ci, row, even] != 0.0)

    def test_error_rate_uses_fixed_scale(self):
        stream = quiet_stream()
        tf = fit_transforms(stream, 120_000, prng_new(1).child("p"))
        for node in stream.nodes:
            mu, sigma = tf.trace_stats[f"{node}/err_rate"]
            assert (mu, sigma) == (0.0, 0.1)


class TestPreprocessStream:
    def test_round_trip_and_labels(self, tiny_bundle):
        bundle, result, raw = tiny_bundle
        nodes, split, header = windows_from_bytes(raw)
        assert nodes == result.nodes
        assert header["vocab_size"] == result.transforms.vocab_size
        # serialization is idempotent: parse -> serialize reproduces the bytes
        again = windows_to_bytes(nodes, split, header["window_ms"],
                                 header["stride_ms"], header["vocab_size"])
        assert again == raw
        # parsed values sit within the 6-decimal serialization resolution
        for a, b in zip(split.train[:3] + split.test[:3],
                        result.split.train[:3] + result.split.test[:3]):
            assert (a.start_ms, a.end_ms, a.label_anomalous, a.label_root_cause,
                    a.label_fault_type) == (b.start_ms, b.end_ms, b.label_anomalous,
                                            b.label_root_cause, b.label_fault_type)
            for sa, sb in zip(a.segments, b.segments):
                assert np.allclose(sa.metric, sb.metric, atol=5.1e-7)
                assert np.array_equal(sa.log, sb.log)
                assert np.allclose(sa.trace, sb.trace, atol=5.1e-7)
                assert sa.alerts == sb.alerts

    def test_labels_follow_window_label_rule(self, tiny_sim, tiny_bundle):
        _, _, faults, _ = tiny_sim
        _, result, _ = tiny_bundle
        for w in result.split.all_windows:
            expect = window_label(w.start_ms, w.end_ms, faults)
            assert w.label_anomalous == (expect is not None)
            if expect is not None:
                assert w.label_root_cause == expect.target_node

    def test_chronological_invariant_on_output(self, tiny_bundle):
        _, result, _ = tiny_bundle
        result.split.check_chronological()

    def test_splits_meet_minimum_size(self):
        stream = quiet_stream(duration_s=240)
        faults = []
        with pytest.raises(ValueError, match="windows after guards|too few"):
            preprocess_stream(stream, faults, 30_000, 30_000, prng_new(0).child("p"))


class TestDatasetPremise:
    def test_root_cause_has_max_metric_z_mass(self, local_bundle):
        # the dataset-level separability premise: for >= 90% of anomalous test
        # windows the root node carries the largest total |z| over metrics
        bundle, _, _ = local_bundle
        anomalous = [w for w in bundle.split.test if w.label_anomalous]
        assert len(anomalous) >= 30
        hits = 0
        for w in anomalous:
            mass = [np.abs(seg.metric).sum() for seg in w.segments]
            hits += int(np.argmax(mass) == w.label_root_cause)
        assert hits / len(anomalous) >= 0.90
