"""Domain types shared across the pipeline.

Conventions: timestamps are integer milliseconds everywhere inside the
package; seconds only appear at API boundaries (scenario durations, CLI
flags). All types validate their invariants on construction and are treated
as immutable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

__all__ = [
    "FaultType",
    "Task",
    "Backbone",
    "AlertSource",
    "AlertDirection",
    "ServiceGraph",
    "FaultSpec",
    "Span",
    "TelemetryStream",
    "NodeFeatures",
    "NodeSegments",
    "DiagnosisWindow",
    "DatasetSplit",
    "RunConfig",
]


class FaultType(str, Enum):
    CPU_STRESS = "CPU_STRESS"
    MEM_LEAK = "MEM_LEAK"
    NET_DELAY = "NET_DELAY"
    CRASH = "CRASH"


FAULT_TYPES = tuple(FaultType)


class Task(str, Enum):
    DETECT = "DETECT"
    LOCALIZE = "LOCALIZE"
    CLASSIFY = "CLASSIFY"


class Backbone(str, Enum):
    DIAGMLP = "DIAGMLP"
    GCN = "GCN"


class AlertSource(str, Enum):
    METRIC_CHANNEL = "METRIC_CHANNEL"
    TEMPLATE_RATE = "TEMPLATE_RATE"
    TRACE_LATENCY = "TRACE_LATENCY"


class AlertDirection(str, Enum):
    HIGH = "HIGH"
    LOW = "LOW"


@dataclass(frozen=True)
class ServiceGraph:
    """Directed dependency graph over service instances; edge = caller -> callee."""

    n_nodes: int
    node_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if len(self.node_names) != self.n_nodes:
            raise ValueError(
                f"expected {self.n_nodes} node names, got {len(self.node_names)}"
            )
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ValueError(f"edge ({u}, {v}) references a node >= {self.n_nodes}")
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        if self.n_nodes > 1 and not self._weakly_connected():
            raise ValueError("graph is not weakly connected")

    def _weakly_connected(self) -> bool:
        adj: dict[int, list[int]] = {i: [] for i in range(self.n_nodes)}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        seen = {0}
        stack = [0]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == self.n_nodes

    def callers_of(self, node: int) -> list[int]:
        """Direct upstream callers of a node."""
        return [u for u, v in self.edges if v == node]

    def upstream_hops(self, target: int) -> dict[int, int]:
        """Shortest hop distance from each upstream caller to the target.

        A node u is upstream of the target if some call path u -> ... -> target
        exists. The target itself is excluded.
        """
        hops: dict[int, int] = {}
        frontier = [target]
        depth = 0
        visited = {target}
        while frontier:
            depth += 1
            nxt = []
            for v in frontier:
                for u in self.callers_of(v):
                    if u not in visited:
                        visited.add(u)
                        hops[u] = depth
                        nxt.append(u)
            frontier = nxt
        return hops


@dataclass(frozen=True)
class FaultSpec:
    """One injected fault: target, type, interval, and propagation strength."""

    target_node: int
    fault_type: FaultType
    start_ms: int
    duration_ms: int
    severity: float
    propagation_factor: float

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_ms} ms")
        if not (0.0 < self.severity <= 1.0):
            raise ValueError(f"severity must be in (0, 1], got {self.severity}")
        if not (0.0 <= self.propagation_factor <= 1.0):
            raise ValueError(
                f"propagation_factor must be in [0, 1], got {self.propagation_factor}"
            )

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms

    def covers(self, t_ms: int) -> bool:
        return self.start_ms <= t_ms < self.end_ms


class Span(NamedTuple):
    """One trace span along a caller -> callee edge."""

    t_ms: int
    caller: str
    callee: str
    latency_ms: float
    status: str


@dataclass
class TelemetryStream:
    """Raw multimodal telemetry for one simulated scenario.

    metrics: node -> channel -> [(t_ms, value)], non-decreasing timestamps.
    logs:    node -> [(t_ms, text)], non-decreasing timestamps.
    spans:   time-ordered list of Span records.
    """

    nodes: tuple[str, ...]
    metrics: dict[str, dict[str, list[tuple[int, float]]]]
    logs: dict[str, list[tuple[int, str]]]
    spans: list[Span]

    def validate(self, graph: Optional[ServiceGraph] = None) -> None:
        known = set(self.nodes)
        for node, channels in self.metrics.items():
            if node not in known:
                raise ValueError(f"metrics for unknown node {node!r}")
            for channel, series in channels.items():
                if any(b[0] < a[0] for a, b in zip(series, series[1:])):
                    raise ValueError(
                        f"non-monotone timestamps in metric {node}/{channel}"
                    )
        for node, lines in self.logs.items():
            if node not in known:
                raise ValueError(f"logs for unknown node {node!r}")
            if any(b[0] < a[0] for a, b in zip(lines, lines[1:])):
                raise ValueError(f"non-monotone timestamps in logs of {node}")
        if any(b.t_ms < a.t_ms for a, b in zip(self.spans, self.spans[1:])):
            raise ValueError("non-monotone timestamps in spans")
        for s in self.spans:
            if s.caller not in known or s.callee not in known:
                raise ValueError(f"span references unknown node: {s}")
        if graph is not None:
            edge_names = {
                (graph.node_names[u], graph.node_names[v]) for u, v in graph.edges
            }
            for s in self.spans:
                if (s.caller, s.callee) not in edge_names:
                    raise ValueError(
                        f"span ({s.caller} -> {s.callee}) is not a graph edge"
                    )

    @staticmethod
    def empty(nodes: tuple[str, ...]) -> "TelemetryStream":
        return TelemetryStream(nodes=nodes, metrics={}, logs={}, spans=[])


@dataclass(eq=False)
class NodeFeatures:
    """Per-node embedded features: one d-vector per modality."""

    x_metric: np.ndarray
    x_log: np.ndarray
    x_trace: np.ndarray

    def __post_init__(self):
        d = self.x_metric.shape
        if not (self.x_log.shape == d and self.x_trace.shape == d and len(d) == 1):
            raise ValueError("modality vectors must share one length d")
        for name in ("x_metric", "x_log", "x_trace"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def d(self) -> int:
        return self.x_metric.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NodeFeatures):
            return NotImplemented
        return (
            np.array_equal(self.x_metric, other.x_metric)
            and np.array_equal(self.x_log, other.x_log)
            and np.array_equal(self.x_trace, other.x_trace)
        )


@dataclass(eq=False)
class NodeSegments:
    """Pre-embedding inputs for one node in one window.

    metric/log/trace are (channels x T) arrays; alerts is the time-ordered
    alert token id sequence for the window.
    """

    metric: np.ndarray
    log: np.ndarray
    trace: np.ndarray
    alerts: tuple[int, ...]

    def __eq__(self, other) -> bool:
        if not isinstance(other, NodeSegments):
            return NotImplemented
        return (
            np.array_equal(self.metric, other.metric)
            and np.array_equal(self.log, other.log)
            and np.array_equal(self.trace, other.trace)
            and self.alerts == other.alerts
        )


@dataclass(eq=False)
class DiagnosisWindow:
    """One fixed-length labeled window of preprocessed per-node inputs.

    Encoders are trained end-to-end, so windows carry the pre-embedding
    segments; the d-vector features of each node are produced from these by
    the embedding module at the current parameters.
    """

    start_ms: int
    end_ms: int
    segments: list[NodeSegments]
    label_anomalous: bool
    label_root_cause: Optional[int] = None
    label_fault_type: Optional[int] = None

    def __post_init__(self):
        if self.end_ms <= self.start_ms:
            raise ValueError("window_end must exceed window_start")
        has_labels = self.label_root_cause is not None and self.label_fault_type is not None
        if self.label_anomalous != has_labels:
            raise ValueError(
                "root-cause and fault-type labels must be present iff anomalous"
            )

    @property
    def length_ms(self) -> int:
        return self.end_ms - self.start_ms

    @property
    def n_nodes(self) -> int:
        return len(self.segments)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiagnosisWindow):
            return NotImplemented
        return (
            self.start_ms == other.start_ms
            and self.end_ms == other.end_ms
            and self.label_anomalous == other.label_anomalous
            and self.label_root_cause == other.label_root_cause
            and self.label_fault_type == other.label_fault_type
            and self.segments == other.segments
        )


@dataclass
class DatasetSplit:
    """Chronological train/valid/test partition of diagnosis windows."""

    train: list[DiagnosisWindow]
    valid: list[DiagnosisWindow]
    test: list[DiagnosisWindow]

    def __post_init__(self):
        self.check_chronological()

    def check_chronological(self) -> None:
        order = [self.train, self.valid, self.test]
        for earlier, later in zip(order, order[1:]):
            if earlier and later:
                if max(w.end_ms for w in earlier) > min(w.start_ms for w in later):
                    raise ValueError("splits are not chronologically ordered")
        ids = [(w.start_ms, w.end_ms) for part in order for w in part]
        if len(ids) != len(set(ids)):
            raise ValueError("a window appears in more than one split")

    @property
    def all_windows(self) -> list[DiagnosisWindow]:
        return [*self.train, *self.valid, *self.test]


@dataclass(frozen=True)
class RunConfig:
    """All knobs for one training/evaluation run. Serializes to flat JSON."""

    seed: int
    task: Task = Task.LOCALIZE
    backbone: Backbone = Backbone.DIAGMLP
    d: int = 16
    hidden: int = 64
    dropout_rate: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    window_len: float = 60.0
    stride: float = 60.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        for name in ("d", "hidden", "learning_rate", "batch_size", "max_epochs",
                     "window_len", "stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # patience=0 is meaningful: stop after the first epoch.
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"] = self.task.value
        out["backbone"] = self.backbone.value
        return out

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        data["task"] = Task(data["task"])
        data["backbone"] = Backbone(data["backbone"])
        return RunConfig(**data)
