"""Diagnosis backbones: a topology-agnostic MLP and its graph-conv twin.

Both models consume identical per-node features. Each node's modality
vectors and learnable position embedding are concatenated (width 4d) and
passed through a shared fusion block, Dropout(ReLU(LN(Wx + b))). DiagMLP
then concatenates the N fused vectors in node-index order and applies a
second fusion block plus an affine task head; it never reads the graph. The
GCN variant inserts exactly two message-passing layers H <- ReLU(A_hat H W)
between modal fusion and node concatenation, with
A_hat = D^{-1/2}(A + A^T + I)D^{-1/2}, and is otherwise identical — the
ablation swaps one stage and holds everything else fixed.

Losses are mean softmax cross-entropy; gradients come from the reverse-mode
tape and cover heads, fusion blocks, message passing, encoders, and position
embeddings.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from . import embed
from .prng import Prng
from .types import FAULT_TYPES, Backbone, NodeFeatures, ServiceGraph, Task

__all__ = [
    "LN_EPS",
    "init_params",
    "normalized_adjacency",
    "fusion_mlp",
    "diagmlp_forward",
    "gcn_forward",
    "loss_and_grads",
    "count_params",
    "head_name",
    "WindowBatch",
    "windows_to_batch",
    "forward_graph",
    "trunk_dims",
]

LN_EPS = 1e-5


def head_name(task: Task) -> str:
    return f"head_{task.value.lower()}"


def head_classes(task: Task, n_nodes: int) -> int:
    if task is Task.DETECT:
        return 2
    if task is Task.LOCALIZE:
        return n_nodes
    return len(FAULT_TYPES)


def init_params(
    prng: Prng,
    task: Task,
    backbone: Backbone,
    n_nodes: int,
    d: int,
    hidden: int,
    vocab_size: int,
    metric_channels: int,
    log_channels: int,
    trace_channels: int,
    tcn_hidden: int = embed.TCN_HIDDEN,
) -> dict[str, np.ndarray]:
    """Encoder + trunk + task-head parameters.

    Every tensor draws from a PRNG stream named after it, so tensors shared
    by both backbones initialize identically regardless of creation order.
    """
    h_out = 2 * hidden
    params = embed.init_encoder_params(
        prng, d, metric_channels, log_channels, trace_channels, vocab_size, tcn_hidden
    )

    def u(name, shape, fan_in):
        params[name] = embed.uniform_init(prng, name, shape, fan_in)

    u("pos_embed", (n_nodes, d), d)
    u("modal_fusion/w", (hidden, 4 * d), 4 * d)
    u("modal_fusion/b", (hidden,), 4 * d)
    u("node_fusion/w", (h_out, n_nodes * hidden), n_nodes * hidden)
    u("node_fusion/b", (h_out,), n_nodes * hidden)
    if backbone is Backbone.GCN:
        u("gcn/w1", (hidden, hidden), hidden)
        u("gcn/w2", (hidden, hidden), hidden)
    c = head_classes(task, n_nodes)
    u(f"{head_name(task)}/w", (c, h_out), h_out)
    u(f"{head_name(task)}/b", (c,), h_out)
    return params


def normalized_adjacency(graph: ServiceGraph) -> np.ndarray:
    """A_hat = D^{-1/2} (A + A^T + I) D^{-1/2}; an edge present in both
    directions contributes 2, matching the literal symmetrization."""
    n = graph.n_nodes
    m = np.eye(n)
    for u, v in graph.edges:
        m[u, v] += 1.0
        m[v, u] += 1.0
    d_inv_sqrt = 1.0 / np.sqrt(m.sum(axis=1))
    return m * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def _transpose(t: ad.Tensor) -> ad.Tensor:
    return ad.Tensor(t.data.T, (t,), lambda g: (g.T,))


def _fusion_block(
    x: ad.Tensor,
    w: ad.Tensor,
    b: ad.Tensor,
    dropout_rate: float,
    training: bool,
    prng,
) -> ad.Tensor:
    """Dropout(ReLU(LN(Wx + b))) over the rows of a (B, in) tensor."""
    z = ad.add(ad.matmul(x, _transpose(w)), b)
    h = ad.relu(ad.layer_norm(z, LN_EPS))
    if training and dropout_rate > 0.0:
        return ad.apply_dropout(h, ad.dropout_mask(prng, dropout_rate, h.data.shape))
    return h


def fusion_mlp(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    dropout_rate: float = 0.0,
    training: bool = False,
    prng=None,
) -> np.ndarray:
    """Single fusion block on one vector; evaluation mode is deterministic."""
    x = np.asarray(x, dtype=np.float64)
    if w.shape[1] != x.shape[-1]:
        raise ValueError(f"weight expects input width {w.shape[1]}, got {x.shape[-1]}")
    if training and dropout_rate > 0.0 and prng is None:
        raise ValueError("training-mode dropout requires a prng")
    out = _fusion_block(
        ad.constant(x[None]), ad.parameter(w), ad.parameter(b),
        dropout_rate, training, prng,
    )
    return out.data[0]


class WindowBatch:
    """Dense arrays for a list of windows: per-node segments flattened to
    (B*N, C, T) plus event-weight rows and any labels present."""

    def __init__(self, windows, vocab_size: int):
        if not windows:
            raise ValueError("empty batch")
        n = windows[0].n_nodes
        for w in windows:
            if w.n_nodes != n:
                raise ValueError("windows disagree on node count")
        self.n_nodes = n
        self.size = len(windows)
        self.metric = np.stack([seg.metric for w in windows for seg in w.segments])
        self.log = np.stack([seg.log for w in windows for seg in w.segments])
        self.trace = np.stack([seg.trace for w in windows for seg in w.segments])
        self.event_w = embed.event_weights(
            [seg.alerts for w in windows for seg in w.segments], vocab_size
        )
        self.anomalous = np.array([int(w.label_anomalous) for w in windows])
        self.root_cause = np.array(
            [-1 if w.label_root_cause is None else w.label_root_cause for w in windows]
        )
        self.fault_type = np.array(
            [-1 if w.label_fault_type is None else w.label_fault_type for w in windows]
        )

    def labels(self, task: Task) -> np.ndarray:
        if task is Task.DETECT:
            return self.anomalous
        if task is Task.LOCALIZE:
            return self.root_cause
        return self.fault_type

    def select(self, rows: np.ndarray) -> "WindowBatch":
        out = object.__new__(WindowBatch)
        out.n_nodes = self.n_nodes
        out.size = len(rows)
        node_rows = (rows[:, None] * self.n_nodes + np.arange(self.n_nodes)).ravel()
        out.metric = self.metric[node_rows]
        out.log = self.log[node_rows]
        out.trace = self.trace[node_rows]
        out.event_w = self.event_w[node_rows]
        out.anomalous = self.anomalous[rows]
        out.root_cause = self.root_cause[rows]
        out.fault_type = self.fault_type[rows]
        return out


def windows_to_batch(windows, vocab_size: int) -> WindowBatch:
    return WindowBatch(windows, vocab_size)


def trunk_dims(params: dict[str, np.ndarray]) -> tuple[int, int, int]:
    """(n_nodes, d, hidden) as recorded in the parameter shapes."""
    n, d = params["pos_embed"].shape
    hidden = params["modal_fusion/w"].shape[0]
    return n, d, hidden


def forward_graph(
    p: dict[str, ad.Tensor],
    batch: WindowBatch,
    task: Task,
    backbone: Backbone,
    adj: np.ndarray,
    dropout_rate: float = 0.0,
    training: bool = False,
    prng=None,
    return_trunk: bool = False,
):
    """Tape graph from raw segments to logits (B, c).

    Dropout masks, when active, are drawn modal stage first, then node
    stage, so training runs are reproducible from the step PRNG.
    """
    B, N = batch.size, batch.n_nodes
    x_metric = embed.encoder_graph(ad.constant(batch.metric), p, "enc_metric")
    x_log = embed.encoder_graph(ad.constant(batch.log), p, "enc_log")
    x_trace = ad.add(
        embed.encoder_graph(ad.constant(batch.trace), p, "enc_trace"),
        embed.events_graph(batch.event_w, p),
    )
    pos = ad.Tensor(
        np.tile(p["pos_embed"].data, (B, 1)),
        (p["pos_embed"],),
        lambda g: (g.reshape(B, N, -1).sum(axis=0),),
    )
    x = ad.concat([x_metric, x_log, x_trace, pos], axis=1)  # (B*N, 4d)

    fused = _fusion_block(
        x, p["modal_fusion/w"], p["modal_fusion/b"], dropout_rate, training, prng
    )  # (B*N, h)
    hidden = fused.data.shape[1]

    if backbone is Backbone.GCN:
        if adj is None:
            raise ValueError("GCN forward requires a normalized adjacency")
        h = ad.reshape(fused, (B, N, hidden))
        for w_name in ("gcn/w1", "gcn/w2"):
            h = ad.relu(ad.matmul(ad.matmul(ad.constant(adj), h), p[w_name]))
        flat = ad.reshape(h, (B, N * hidden))
    else:
        flat = ad.reshape(fused, (B, N * hidden))

    trunk = _fusion_block(
        flat, p["node_fusion/w"], p["node_fusion/b"], dropout_rate, training, prng
    )  # (B, h_out)
    name = head_name(task)
    logits = ad.add(ad.matmul(trunk, _transpose(p[f"{name}/w"])), p[f"{name}/b"])
    if return_trunk:
        return logits, trunk
    return logits


def _features_to_batch(features: list[NodeFeatures]) -> np.ndarray:
    return np.stack([np.concatenate([f.x_metric, f.x_log, f.x_trace]) for f in features])


def _trunk_from_features(
    params: dict[str, np.ndarray],
    features: list[NodeFeatures],
    backbone: Backbone,
    adj,
    task: Task,
) -> np.ndarray:
    n, d, hidden = trunk_dims(params)
    if len(features) != n:
        raise ValueError(f"model fuses {n} nodes, got {len(features)}")
    if f"{head_name(task)}/w" not in params:
        raise ValueError(f"parameters carry no {task.value} head")
    p = {k: ad.parameter(v) for k, v in params.items()}
    x = np.concatenate([_features_to_batch(features), params["pos_embed"]], axis=1)
    fused = _fusion_block(ad.constant(x), p["modal_fusion/w"], p["modal_fusion/b"], 0.0, False, None)
    if backbone is Backbone.GCN:
        h = ad.reshape(fused, (1, n, hidden))
        for w_name in ("gcn/w1", "gcn/w2"):
            h = ad.relu(ad.matmul(ad.matmul(ad.constant(adj), h), p[w_name]))
        flat = ad.reshape(h, (1, n * hidden))
    else:
        flat = ad.reshape(fused, (1, n * hidden))
    trunk = _fusion_block(flat, p["node_fusion/w"], p["node_fusion/b"], 0.0, False, None)
    name = head_name(task)
    logits = ad.add(ad.matmul(trunk, _transpose(p[f"{name}/w"])), p[f"{name}/b"])
    return logits.data[0]


def diagmlp_forward(
    features: list[NodeFeatures],
    params: dict[str, np.ndarray],
    task: Task = Task.LOCALIZE,
) -> np.ndarray:
    """Evaluation-mode logits for one window's features; graph-free by
    construction."""
    return _trunk_from_features(params, features, Backbone.DIAGMLP, None, task)


def gcn_forward(
    features: list[NodeFeatures],
    graph: ServiceGraph,
    params: dict[str, np.ndarray],
    task: Task = Task.LOCALIZE,
) -> np.ndarray:
    """Evaluation-mode logits with two message-passing layers between modal
    fusion and node concatenation."""
    if graph.n_nodes != len(features):
        raise ValueError(
            f"graph has {graph.n_nodes} nodes, features have {len(features)}"
        )
    return _trunk_from_features(
        params, features, Backbone.GCN, normalized_adjacency(graph), task
    )


def loss_and_grads(
    params: dict[str, np.ndarray],
    windows,
    task: Task,
    backbone: Backbone,
    graph: ServiceGraph,
    vocab_size: int,
    dropout_rate: float = 0.0,
    training: bool = True,
    prng=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the labeled windows of a batch plus gradients
    for every parameter tensor."""
    usable = []
    for w in windows:
        if task is not Task.DETECT and not w.label_anomalous:
            warnings.warn(f"window [{w.start_ms}, {w.end_ms}) lacks a {task.value} label; skipped")
            continue
        usable.append(w)
    if not usable:
        raise ValueError(f"no window in the batch carries a {task.value} label")

    batch = windows_to_batch(usable, vocab_size)
    p = {k: ad.parameter(v) for k, v in params.items()}
    adj = normalized_adjacency(graph) if backbone is Backbone.GCN else None
    logits = forward_graph(
        p, batch, task, backbone, adj, dropout_rate, training, prng
    )
    loss = ad.cross_entropy(logits, batch.labels(task))
    ad.backward(loss)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in p.items()
    }
    return float(loss.data), grads


def count_params(params: dict[str, np.ndarray], prefix: str = "") -> int:
    """Exact trainable scalar count, optionally restricted to a name prefix."""
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))
