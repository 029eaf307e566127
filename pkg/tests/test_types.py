"""Construction-time invariants of the domain types."""

import numpy as np
import pytest

from microdiag.types import (
    Backbone,
    DatasetSplit,
    DiagnosisWindow,
    FaultSpec,
    FaultType,
    NodeFeatures,
    NodeSegments,
    RunConfig,
    ServiceGraph,
    Task,
    TelemetryStream,
)


def g(n, edges):
    return ServiceGraph(n_nodes=n, node_names=tuple(f"svc-{i}" for i in range(n)), edges=tuple(edges))


def make_window(start=0, end=1000, anomalous=False, root=None, ftype=None, n_nodes=2):
    seg = NodeSegments(
        metric=np.zeros((1, 1)), log=np.zeros((1, 1)), trace=np.zeros((1, 1)), alerts=()
    )
    return DiagnosisWindow(
        start_ms=start, end_ms=end, segments=[seg] * n_nodes,
        label_anomalous=anomalous, label_root_cause=root, label_fault_type=ftype,
    )


class TestServiceGraph:
    def test_valid_graph(self):
        graph = g(3, [(0, 1), (1, 2)])
        assert graph.callers_of(2) == [1]

    def test_edge_out_of_range(self):
        with pytest.raises(ValueError, match="references a node"):
            g(2, [(0, 2)])

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            g(2, [(1, 1)])

    def test_duplicate_edge_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            g(3, [(0, 1), (0, 1), (1, 2)])

    def test_disconnected_rejected(self):
        with pytest.raises(ValueError, match="connected"):
            g(4, [(0, 1), (2, 3)])

    def test_single_node_graph_allowed(self):
        assert g(1, []).n_nodes == 1

    def test_upstream_hops(self):
        # chain 0 -> 1 -> 2: both callers are upstream of node 2
        graph = g(3, [(0, 1), (1, 2)])
        assert graph.upstream_hops(2) == {1: 1, 0: 2}
        assert graph.upstream_hops(0) == {}


class TestFaultSpec:
    def test_covers_is_half_open(self):
        f = FaultSpec(0, FaultType.CRASH, 1000, 500, 0.9, 0.0)
        assert f.covers(1000) and f.covers(1499)
        assert not f.covers(1500) and not f.covers(999)
        assert f.end_ms == 1500

    @pytest.mark.parametrize("sev", [0.0, -0.1, 1.5])
    def test_severity_range(self, sev):
        with pytest.raises(ValueError, match="severity"):
            FaultSpec(0, FaultType.CRASH, 0, 1, sev, 0.0)

    def test_duration_positive(self):
        with pytest.raises(ValueError, match="duration"):
            FaultSpec(0, FaultType.CRASH, 0, 0, 0.9, 0.0)

    def test_propagation_range(self):
        with pytest.raises(ValueError, match="propagation"):
            FaultSpec(0, FaultType.CRASH, 0, 1, 0.9, 1.2)


class TestTelemetryStream:
    def test_monotone_timestamps_enforced(self):
        stream = TelemetryStream(
            nodes=("a",),
            metrics={"a": {"cpu": [(5, 1.0), (3, 1.0)]}},
            logs={},
            spans=[],
        )
        with pytest.raises(ValueError, match="non-monotone"):
            stream.validate()

    def test_unknown_node_rejected(self):
        stream = TelemetryStream(nodes=("a",), metrics={"b": {}}, logs={}, spans=[])
        with pytest.raises(ValueError, match="unknown node"):
            stream.validate()

    def test_span_must_follow_graph_edges(self):
        from microdiag.types import Span

        graph = g(2, [(0, 1)])
        stream = TelemetryStream(
            nodes=graph.node_names,
            metrics={},
            logs={},
            spans=[Span(0, "svc-1", "svc-0", 10.0, "ok")],
        )
        with pytest.raises(ValueError, match="not a graph edge"):
            stream.validate(graph)


class TestNodeFeatures:
    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="share one length"):
            NodeFeatures(np.zeros(3), np.zeros(3), np.zeros(4))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            NodeFeatures(np.array([np.nan, 0.0]), np.zeros(2), np.zeros(2))

    def test_equality_is_elementwise(self):
        a = NodeFeatures(np.ones(2), np.zeros(2), np.ones(2))
        b = NodeFeatures(np.ones(2), np.zeros(2), np.ones(2))
        assert a == b and a.d == 2


class TestDiagnosisWindow:
    def test_labels_present_iff_anomalous(self):
        with pytest.raises(ValueError, match="iff anomalous"):
            make_window(anomalous=True)
        with pytest.raises(ValueError, match="iff anomalous"):
            make_window(anomalous=False, root=1, ftype=0)
        w = make_window(anomalous=True, root=1, ftype=2)
        assert w.length_ms == 1000 and w.n_nodes == 2

    def test_empty_interval_rejected(self):
        with pytest.raises(ValueError, match="exceed"):
            make_window(start=1000, end=1000)


class TestDatasetSplit:
    def test_chronological_holds(self):
        split = DatasetSplit(
            train=[make_window(0, 1000)],
            valid=[make_window(1000, 2000)],
            test=[make_window(2000, 3000)],
        )
        assert len(split.all_windows) == 3

    def test_overlap_across_boundary_rejected(self):
        with pytest.raises(ValueError, match="chronologically"):
            DatasetSplit(
                train=[make_window(0, 2000)],
                valid=[make_window(1000, 3000)],
                test=[make_window(3000, 4000)],
            )

    def test_duplicate_window_rejected(self):
        with pytest.raises(ValueError, match="more than one split"):
            DatasetSplit(
                train=[make_window(0, 1000), make_window(0, 1000)],
                valid=[make_window(1000, 2000)],
                test=[make_window(2000, 3000)],
            )

    def test_empty_middle_split_tolerated_by_check(self):
        split = DatasetSplit(
            train=[make_window(0, 1000)], valid=[], test=[make_window(5000, 6000)]
        )
        split.check_chronological()


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, task=Task.CLASSIFY, backbone=Backbone.GCN, d=8)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_patience_zero_allowed(self):
        assert RunConfig(seed=0, patience=0).patience == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"seed": -1},
            {"seed": 0, "d": 0},
            {"seed": 0, "dropout_rate": 1.0},
            {"seed": 0, "patience": -1},
            {"seed": 0, "learning_rate": 0.0},
        ],
    )
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)

    def test_from_dict_rejects_unknown_keys(self):
        data = RunConfig(seed=0).to_dict()
        data["mystery"] = 1
        with pytest.raises(TypeError):
            RunConfig.from_dict(data)
