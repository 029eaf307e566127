"""Training, evaluation metrics, the backbone ablation, and separability.

Training is plain Adam over mini-batches with per-epoch shuffling from the
run PRNG and early stopping on a validation objective: binary F1 for
detection, macro F1 for classification, Top-1 accuracy for localization.
Everything is deterministic given a RunConfig.

The ablation harness trains both backbones on byte-identical preprocessed
dataset bytes with identical shared-tensor initialization and batch
schedules, so the only degree of freedom is the message-passing stage. Stage
digests record this and are asserted, not assumed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import embed
from . import models
from .preprocess import PreprocessResult, preprocess_stream, windows_from_bytes, windows_to_bytes
from .prng import Prng, prng_new
from .simulator import ScenarioSpec, generate_topology, schedule_faults, simulate
from .types import Backbone, DatasetSplit, DiagnosisWindow, RunConfig, ServiceGraph, Task

__all__ = [
    "DatasetBundle",
    "prepare_dataset",
    "TrainResult",
    "train",
    "MetricsReport",
    "evaluate_detection",
    "evaluate_classification",
    "evaluate_localization",
    "topk_accuracy",
    "precision_recall_f1",
    "ablate",
    "AblateResult",
    "SeparabilityMode",
    "separability_report",
    "silhouette_score",
    "pca_2d",
    "results_csv_rows",
    "render_summary",
    "EVAL_CHUNK",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_CHUNK = 128
TOPK_KS = (1, 3, 5)


@dataclass
class DatasetBundle:
    """A parsed dataset plus everything a training run needs with it."""

    nodes: tuple[str, ...]
    split: DatasetSplit
    graph: ServiceGraph
    vocab_size: int
    digest: str  # sha256 of the serialized windows bytes

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def dims(self) -> tuple[int, int, int]:
        seg = self.split.train[0].segments[0]
        return seg.metric.shape[0], seg.log.shape[0], seg.trace.shape[0]


def prepare_dataset(
    scenario: ScenarioSpec,
    dataset_seed: int,
    window_s: Optional[float] = None,
    stride_s: Optional[float] = None,
    metric_k: Optional[int] = None,
) -> tuple[DatasetBundle, PreprocessResult, bytes]:
    """Simulate a scenario and preprocess it into a canonical dataset.

    The bundle is parsed back from the serialized windows bytes, so
    in-memory runs and file-staged CLI runs consume identical inputs.
    """
    root = prng_new(dataset_seed)
    graph = generate_topology(scenario.n_nodes, scenario.edge_density, root.child("simulate"))
    faults = schedule_faults(scenario, graph, root.child("simulate"))
    stream = simulate(graph, faults, scenario, root.child("simulate"))
    window_ms = int(round((scenario.window_len_s if window_s is None else window_s) * 1000))
    stride_ms = int(round((scenario.stride_s if stride_s is None else stride_s) * 1000))
    result = preprocess_stream(
        stream, faults, window_ms, stride_ms, root.child("preprocess"), metric_k=metric_k
    )
    raw = windows_to_bytes(
        result.nodes, result.split, window_ms, stride_ms, result.transforms.vocab_size
    )
    nodes, split, header = windows_from_bytes(raw)
    bundle = DatasetBundle(
        nodes=nodes,
        split=split,
        graph=result.transforms.graph,
        vocab_size=int(header["vocab_size"]),
        digest=hashlib.sha256(raw).hexdigest(),
    )
    return bundle, result, raw


def _task_windows(windows: list[DiagnosisWindow], task: Task) -> list[DiagnosisWindow]:
    if task is Task.DETECT:
        return list(windows)
    return [w for w in windows if w.label_anomalous]


def _eval_logits(
    params: dict[str, np.ndarray],
    batch: models.WindowBatch,
    task: Task,
    backbone: Backbone,
    adj: Optional[np.ndarray],
) -> np.ndarray:
    p = {k: ad.constant(v) for k, v in params.items()}
    rows = np.arange(batch.size)
    outs = []
    for lo in range(0, batch.size, EVAL_CHUNK):
        chunk = batch.select(rows[lo : lo + EVAL_CHUNK])
        outs.append(models.forward_graph(p, chunk, task, backbone, adj).data)
    return np.concatenate(outs, axis=0)


def _objective(logits: np.ndarray, labels: np.ndarray, task: Task) -> float:
    if task is Task.LOCALIZE:
        return topk_accuracy(logits, labels, 1)
    preds = logits.argmax(axis=1)
    if task is Task.DETECT:
        p, r, f1 = precision_recall_f1(labels == 1, preds == 1)
        return f1
    return _macro_f1(labels, preds)


def _ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    zmax = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True)) + zmax
    return float((lse[:, 0] - logits[np.arange(len(labels)), labels]).mean())


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple]  # (epoch, split, loss, objective-or-empty)
    best_epoch: int
    best_objective: float
    epochs_run: int
    schedule_digest: str  # identifies the shuffle/dropout stream lineage


def train(
    bundle: DatasetBundle,
    config: RunConfig,
    tcn_hidden: int = 16,
    frozen: frozenset = frozenset(),
    adj_override: Optional[np.ndarray] = None,
    param_overrides: Optional[dict[str, np.ndarray]] = None,
) -> TrainResult:
    """Adam training with early stopping on the validation objective.

    `frozen`, `adj_override`, and `param_overrides` exist for controlled
    ablation experiments (e.g. identity message passing); normal runs leave
    them unset.
    """
    task, backbone = config.task, config.backbone
    train_w = _task_windows(bundle.split.train, task)
    valid_w = _task_windows(bundle.split.valid, task)
    if not train_w or not valid_w:
        raise ValueError(f"no labeled {task.value} windows in train or valid split")

    mc, lc, tc = bundle.dims()
    root = prng_new(config.seed)
    params = models.init_params(
        root, task, backbone, bundle.n_nodes, config.d, config.hidden,
        bundle.vocab_size, mc, lc, tc, tcn_hidden=tcn_hidden,
    )
    if param_overrides:
        for k, v in param_overrides.items():
            params[k] = np.array(v, dtype=np.float64)
    adj = adj_override
    if adj is None and backbone is Backbone.GCN:
        adj = models.normalized_adjacency(bundle.graph)

    train_batch = models.windows_to_batch(train_w, bundle.vocab_size)
    valid_batch = models.windows_to_batch(valid_w, bundle.vocab_size)
    train_labels = train_batch.labels(task)
    valid_labels = valid_batch.labels(task)

    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    loop = root.child("train")
    best_obj = -math.inf
    best_epoch = 0
    best_loss = math.inf
    last_progress = 0
    best_params = {k: p.copy() for k, p in params.items()}
    history: list[tuple] = []
    n_train = len(train_w)
    epochs_run = 0
    schedule_digest = hashlib.sha256()
    schedule_digest.update(bundle.digest.encode())

    for epoch in range(config.max_epochs):
        epochs_run = epoch + 1
        erng = loop.child(f"epoch:{epoch}")
        order = erng.permutation(n_train)
        if epoch == 0:
            schedule_digest.update(order.tobytes())
        losses = []
        for lo in range(0, n_train, config.batch_size):
            rows = order[lo : lo + config.batch_size]
            chunk = train_batch.select(rows)
            p = {k: ad.parameter(arr) for k, arr in params.items()}
            logits = models.forward_graph(
                p, chunk, task, backbone, adj,
                dropout_rate=config.dropout_rate, training=True,
                prng=erng.child(f"step:{lo // config.batch_size}"),
            )
            loss = ad.cross_entropy(logits, chunk.labels(task))
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"step {lo // config.batch_size}"
                )
            ad.backward(loss)
            losses.append(float(loss.data))
            step += 1
            bc1 = 1.0 - ADAM_BETA1 ** step
            bc2 = 1.0 - ADAM_BETA2 ** step
            for k, tensor in p.items():
                if k in frozen or tensor.grad is None:
                    continue
                g = tensor.grad
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g
                v2[k] = ADAM_BETA2 * v2[k] + (1.0 - ADAM_BETA2) * g * g
                params[k] = params[k] - config.learning_rate * (m[k] / bc1) / (
                    np.sqrt(v2[k] / bc2) + ADAM_EPS
                )

        val_logits = _eval_logits(params, valid_batch, task, backbone, adj)
        val_obj = _objective(val_logits, valid_labels, task)
        val_loss = _ce_loss(val_logits, valid_labels)
        history.append((epoch, "train", float(np.mean(losses)), ""))
        history.append((epoch, "valid", val_loss, val_obj))

        if val_obj > best_obj:
            best_obj = val_obj
            best_epoch = epoch
            best_params = {k: p.copy() for k, p in params.items()}
            last_progress = epoch
        # a falling validation loss also counts as progress, so runs still
        # breaking symmetry are not cut off while the objective sits flat
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            last_progress = epoch
        if epoch - last_progress >= config.patience:
            break

    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        best_objective=best_obj,
        epochs_run=epochs_run,
        schedule_digest=schedule_digest.hexdigest(),
    )


def precision_recall_f1(labels_pos: np.ndarray, preds_pos: np.ndarray) -> tuple[float, float, float]:
    """Binary precision/recall/F1 with 0-denominator conventions."""
    tp = int(np.sum(labels_pos & preds_pos))
    fp = int(np.sum(~labels_pos & preds_pos))
    fn = int(np.sum(labels_pos & ~preds_pos))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def _macro_f1(labels: np.ndarray, preds: np.ndarray) -> float:
    classes = sorted(set(labels.tolist()))
    return float(np.mean([precision_recall_f1(labels == c, preds == c)[2] for c in classes]))


def _macro_prf(labels: np.ndarray, preds: np.ndarray) -> tuple[float, float, float]:
    classes = sorted(set(labels.tolist()))
    prf = np.array([precision_recall_f1(labels == c, preds == c) for c in classes])
    means = prf.mean(axis=0)
    # macro F1 averages per-class F1 (the P,R means do not satisfy the F1
    # identity in general, so the report stores per-class-averaged F1)
    return float(means[0]), float(means[1]), float(means[2])


def topk_accuracy(scores: np.ndarray, true_nodes: np.ndarray, k: int) -> float:
    """Fraction of rows whose true node ranks in the top k by score,
    descending, ties resolved in favor of the lower node index."""
    scores = np.asarray(scores, dtype=np.float64)
    true_nodes = np.asarray(true_nodes, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be >= 1")
    n = scores.shape[1]
    if k > n:
        warnings.warn(f"k={k} exceeds {n} nodes; clamped")
        k = n
    hits = 0
    for row, t in zip(scores, true_nodes):
        s_t = row[t]
        rank = 1 + int(np.sum(row > s_t)) + int(np.sum(row[:t] == s_t))
        hits += rank <= k
    return hits / len(true_nodes)


@dataclass
class MetricsReport:
    """Evaluation metrics for one or more runs of one task."""

    task: Task
    n_runs: int
    per_run: dict[str, list[float]]
    fingerprint: str = ""

    def __post_init__(self):
        for name, values in self.per_run.items():
            if len(values) != self.n_runs:
                raise ValueError(f"metric '{name}' has {len(values)} values for {self.n_runs} runs")
            for v in values:
                if not (0.0 <= v <= 1.0):
                    raise ValueError(f"metric '{name}' value {v} outside [0, 1]")
        if "precision" in self.per_run and "f1" in self.per_run:
            for p, r, f1 in zip(
                self.per_run["precision"], self.per_run["recall"], self.per_run["f1"]
            ):
                want = 2 * p * r / (p + r) if p + r else 0.0
                if not math.isclose(f1, want, rel_tol=0, abs_tol=1e-9):
                    raise ValueError(f"f1={f1} violates 2PR/(P+R)={want}")

    @property
    def mean_and_std(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name, values in self.per_run.items():
            arr = np.array(values)
            out[name] = (float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0)
        return out

    def metric(self, name: str) -> float:
        return self.mean_and_std[name][0]

    @property
    def precision(self) -> Optional[float]:
        return self.metric("precision") if "precision" in self.per_run else None

    @property
    def recall(self) -> Optional[float]:
        return self.metric("recall") if "recall" in self.per_run else None

    @property
    def f1(self) -> Optional[float]:
        return self.metric("f1") if "f1" in self.per_run else None

    @property
    def topk(self) -> dict[int, float]:
        return {
            k: self.metric(f"top{k}")
            for k in TOPK_KS
            if f"top{k}" in self.per_run
        }

    @staticmethod
    def merge(reports: list["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("nothing to merge")
        task = reports[0].task
        names = list(reports[0].per_run)
        if any(r.task is not task or list(r.per_run) != names for r in reports):
            raise ValueError("reports disagree on task or metrics")
        per_run = {n: [v for r in reports for v in r.per_run[n]] for n in names}
        return MetricsReport(
            task=task,
            n_runs=sum(r.n_runs for r in reports),
            per_run=per_run,
            fingerprint=reports[0].fingerprint,
        )


def config_fingerprint(config: RunConfig, dataset_digest: str) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True) + dataset_digest
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _prediction_logits(
    params: dict[str, np.ndarray],
    windows: list[DiagnosisWindow],
    task: Task,
    backbone: Backbone,
    graph: Optional[ServiceGraph],
    vocab_size: int,
    adj_override: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    usable = _task_windows(windows, task)
    if not usable:
        raise ValueError(f"no labeled {task.value} windows to evaluate")
    batch = models.windows_to_batch(usable, vocab_size)
    adj = adj_override
    if adj is None and backbone is Backbone.GCN:
        adj = models.normalized_adjacency(graph)
    logits = _eval_logits(params, batch, task, backbone, adj)
    return logits, batch.labels(task)


def evaluate_detection(
    params, windows, vocab_size: int,
    backbone: Backbone = Backbone.DIAGMLP,
    graph: Optional[ServiceGraph] = None,
    fingerprint: str = "",
    adj_override: Optional[np.ndarray] = None,
) -> MetricsReport:
    logits, labels = _prediction_logits(
        params, windows, Task.DETECT, backbone, graph, vocab_size, adj_override
    )
    if not np.any(labels == 1):
        warnings.warn("no anomalous windows among labels; precision defined as 0")
    p, r, f1 = precision_recall_f1(labels == 1, logits.argmax(axis=1) == 1)
    return MetricsReport(
        task=Task.DETECT, n_runs=1,
        per_run={"precision": [p], "recall": [r], "f1": [f1]},
        fingerprint=fingerprint,
    )


def evaluate_classification(
    params, windows, vocab_size: int,
    backbone: Backbone = Backbone.DIAGMLP,
    graph: Optional[ServiceGraph] = None,
    fingerprint: str = "",
    adj_override: Optional[np.ndarray] = None,
) -> MetricsReport:
    logits, labels = _prediction_logits(
        params, windows, Task.CLASSIFY, backbone, graph, vocab_size, adj_override
    )
    p, r, f1 = _macro_prf(labels, logits.argmax(axis=1))
    return MetricsReport(
        task=Task.CLASSIFY, n_runs=1,
        per_run={"precision": [p], "recall": [r], "f1": [f1]},
        fingerprint=fingerprint,
    )


def evaluate_localization(
    params, windows, vocab_size: int,
    backbone: Backbone = Backbone.DIAGMLP,
    graph: Optional[ServiceGraph] = None,
    fingerprint: str = "",
    adj_override: Optional[np.ndarray] = None,
) -> MetricsReport:
    logits, labels = _prediction_logits(
        params, windows, Task.LOCALIZE, backbone, graph, vocab_size, adj_override
    )
    per_run = {f"top{k}": [topk_accuracy(logits, labels, k)] for k in TOPK_KS if k <= logits.shape[1]}
    return MetricsReport(task=Task.LOCALIZE, n_runs=1, per_run=per_run, fingerprint=fingerprint)


def evaluate(
    params, windows, task: Task, vocab_size: int,
    backbone: Backbone = Backbone.DIAGMLP,
    graph: Optional[ServiceGraph] = None,
    fingerprint: str = "",
    adj_override: Optional[np.ndarray] = None,
) -> MetricsReport:
    fn = {
        Task.DETECT: evaluate_detection,
        Task.CLASSIFY: evaluate_classification,
        Task.LOCALIZE: evaluate_localization,
    }[task]
    return fn(
        params, windows, vocab_size,
        backbone=backbone, graph=graph, fingerprint=fingerprint,
        adj_override=adj_override,
    )


class SeparabilityMode(str, Enum):
    RAW_CONCAT = "RAW_CONCAT"
    MODEL_EMBED = "MODEL_EMBED"


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette with Euclidean distance; singleton-class points score
    0, as does any point whose max(a, b) is 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(points)
    if n != len(labels):
        raise ValueError("points and labels disagree in length")
    if len(set(labels.tolist())) < 2:
        raise ValueError("silhouette needs at least 2 classes")
    # row-chunked so wide feature matrices do not materialize (n, n, D)
    dist = np.empty((n, n))
    chunk = max(1, int(2e7 / max(1, n * points.shape[1])))
    for lo in range(0, n, chunk):
        diff = points[lo : lo + chunk, None, :] - points[None, :, :]
        dist[lo : lo + chunk] = np.sqrt((diff * diff).sum(axis=2))
    classes = sorted(set(labels.tolist()))
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        own_size = int(own.sum())
        if own_size == 1:
            continue
        a = dist[i][own].sum() / (own_size - 1)
        b = min(dist[i][labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Project rows to the top-2 principal components. Deterministic sign:
    each component's largest-magnitude entry is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least 2 rows and 2 feature dimensions")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, [-1, -2]]
    for j in range(2):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps


def separability_report(
    windows: list[DiagnosisWindow],
    mode: SeparabilityMode,
    params: dict[str, np.ndarray],
    vocab_size: int,
    backbone: Backbone = Backbone.DIAGMLP,
    graph: Optional[ServiceGraph] = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """(2D points, root-cause labels, silhouette) over anomalous windows.

    RAW_CONCAT concatenates the N nodes' encoder features (R^{3dN});
    MODEL_EMBED takes the trunk's pre-head representation.  The silhouette
    is computed in the full feature space; the 2D points are a PCA
    projection for plotting only.
    """
    anomalous = [w for w in windows if w.label_anomalous]
    labels = np.array([w.label_root_cause for w in anomalous])
    if len(set(labels.tolist())) < 2:
        raise ValueError("separability needs >= 2 distinct root-cause labels")
    batch = models.windows_to_batch(anomalous, vocab_size)
    p = {k: ad.constant(v) for k, v in params.items()}
    adj = models.normalized_adjacency(graph) if backbone is Backbone.GCN else None

    feats = []
    rows = np.arange(batch.size)
    for lo in range(0, batch.size, EVAL_CHUNK):
        chunk = batch.select(rows[lo : lo + EVAL_CHUNK])
        if mode is SeparabilityMode.RAW_CONCAT:
            xm = embed.encoder_graph(ad.constant(chunk.metric), p, "enc_metric").data
            xl = embed.encoder_graph(ad.constant(chunk.log), p, "enc_log").data
            xt = embed.encoder_graph(ad.constant(chunk.trace), p, "enc_trace").data
            xt = xt + embed.events_graph(chunk.event_w, p).data
            row = np.concatenate([xm, xl, xt], axis=1)  # (B*N, 3d)
            feats.append(row.reshape(chunk.size, -1))
        else:
            task = _head_task(params)
            _, trunk = models.forward_graph(
                p, chunk, task, backbone, adj, return_trunk=True
            )
            feats.append(trunk.data)
    x = np.concatenate(feats, axis=0)
    return pca_2d(x), labels, silhouette_score(x, labels)


def _head_task(params: dict[str, np.ndarray]) -> Task:
    for task in Task:
        if f"{models.head_name(task)}/w" in params:
            return task
    raise ValueError("parameters carry no task head")


@dataclass
class AblateResult:
    task: Task
    seeds: list[int]
    rows: list[tuple]  # (backbone, seed, task, metric, value)
    reports: dict[tuple[str, int], Optional[MetricsReport]]
    checkpoints: dict[tuple[str, int], dict[str, np.ndarray]] = field(repr=False, default_factory=dict)
    histories: dict[tuple[str, int], list[tuple]] = field(repr=False, default_factory=dict)
    stage_digests: dict[tuple[str, int], dict[str, str]] = field(default_factory=dict)
    dataset_digest: str = ""
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def mean(self, backbone: Backbone, metric: str) -> float:
        reports = [
            r for (b, _), r in self.reports.items()
            if b == backbone.value and r is not None and metric in r.per_run
        ]
        return float(np.mean([r.metric(metric) for r in reports]))

    def paired_deltas(self, metric: str) -> list[float]:
        out = []
        for seed in self.seeds:
            a = self.reports.get((Backbone.DIAGMLP.value, seed))
            b = self.reports.get((Backbone.GCN.value, seed))
            if a is not None and b is not None and metric in a.per_run and metric in b.per_run:
                out.append(a.metric(metric) - b.metric(metric))
        return out


def _shared_init_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        if name.startswith("gcn/"):
            continue
        h.update(name.encode())
        h.update(params[name].tobytes())
    return h.hexdigest()


def ablate(
    bundle: DatasetBundle,
    base: RunConfig,
    seeds: list[int],
    tcn_hidden: int = 16,
    disable_message_passing: bool = False,
) -> AblateResult:
    """Train and evaluate both backbones per seed on one dataset.

    With disable_message_passing, the GCN runs with identity adjacency and
    frozen identity conv weights — the controlled-equivalence configuration
    where the two backbones must coincide.
    """
    if len(seeds) < 2:
        raise ValueError("ablation needs at least 2 seeds")
    result = AblateResult(task=base.task, seeds=list(seeds), rows=[], reports={},
                          dataset_digest=bundle.digest)
    mc, lc, tc = bundle.dims()

    for backbone in (Backbone.DIAGMLP, Backbone.GCN):
        for seed in seeds:
            config = dataclasses.replace(base, seed=seed, backbone=backbone)
            key = (backbone.value, seed)
            kwargs = {}
            eval_adj = None
            if disable_message_passing and backbone is Backbone.GCN:
                eye = np.eye(base.hidden)
                eval_adj = np.eye(bundle.n_nodes)
                kwargs = {
                    "adj_override": eval_adj,
                    "param_overrides": {"gcn/w1": eye, "gcn/w2": eye},
                    "frozen": frozenset({"gcn/w1", "gcn/w2"}),
                }
            if disable_message_passing and backbone is Backbone.DIAGMLP:
                kwargs = {"adj_override": np.eye(bundle.n_nodes)}
            try:
                tr = train(bundle, config, tcn_hidden=tcn_hidden, **kwargs)
                fp = config_fingerprint(config, bundle.digest)
                report = evaluate(
                    tr.params, bundle.split.test, base.task, bundle.vocab_size,
                    backbone=backbone, graph=bundle.graph, fingerprint=fp,
                    adj_override=eval_adj,
                )
                init_params = models.init_params(
                    prng_new(seed), base.task, backbone, bundle.n_nodes,
                    base.d, base.hidden, bundle.vocab_size, mc, lc, tc,
                    tcn_hidden=tcn_hidden,
                )
                result.reports[key] = report
                result.checkpoints[key] = tr.params
                result.histories[key] = tr.history
                result.stage_digests[key] = {
                    "dataset": bundle.digest,
                    "shared_init": _shared_init_digest(init_params),
                    "schedule": tr.schedule_digest,
                }
                result.rows.append((backbone.value, seed, base.task.value, "status", "ok"))
                for name in sorted(report.per_run):
                    result.rows.append(
                        (backbone.value, seed, base.task.value, name, report.per_run[name][0])
                    )
            except Exception as exc:  # keep the harness running per contract
                result.reports[key] = None
                result.failures[key] = f"{type(exc).__name__}: {exc}"
                result.rows.append((backbone.value, seed, base.task.value, "status", "failed"))

    for seed in seeds:
        a = result.stage_digests.get((Backbone.DIAGMLP.value, seed))
        b = result.stage_digests.get((Backbone.GCN.value, seed))
        if a and b and a != b:
            raise AssertionError(
                f"fairness violated at seed {seed}: stage digests differ {a} vs {b}"
            )
    return result


def results_csv_rows(result: AblateResult) -> tuple[list[str], list[list]]:
    header = ["backbone", "seed", "task", "metric", "value"]
    rows = [list(r) for r in result.rows]
    return header, rows


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def render_summary(result: AblateResult) -> str:
    """Deterministic markdown summary: per-backbone mean ± std and paired
    per-seed deltas."""
    metric_names = sorted(
        {m for r in result.reports.values() if r is not None for m in r.per_run}
    )
    lines = [
        "# Backbone ablation",
        "",
        f"Task: {result.task.value}. Seeds: {', '.join(str(s) for s in result.seeds)}.",
        f"Dataset digest: `{result.dataset_digest}`.",
        "",
        "| backbone | " + " | ".join(metric_names) + " |",
        "|---" * (len(metric_names) + 1) + "|",
    ]
    for backbone in (Backbone.DIAGMLP, Backbone.GCN):
        reports = [
            r for (b, _), r in sorted(result.reports.items())
            if b == backbone.value and r is not None
        ]
        cells = []
        for name in metric_names:
            vals = np.array([r.metric(name) for r in reports if name in r.per_run])
            if vals.size == 0:
                cells.append("failed")
            else:
                std = vals.std(ddof=1) if vals.size > 1 else 0.0
                cells.append(f"{_fmt(vals.mean())} ± {_fmt(std)}")
        lines.append(f"| {backbone.value} | " + " | ".join(cells) + " |")

    lines += ["", "## Paired per-seed deltas (DIAGMLP − GCN)", ""]
    lines.append("| metric | " + " | ".join(f"seed {s}" for s in result.seeds) + " | mean |")
    lines.append("|---" * (len(result.seeds) + 2) + "|")
    for name in metric_names:
        deltas = []
        for seed in result.seeds:
            a = result.reports.get((Backbone.DIAGMLP.value, seed))
            b = result.reports.get((Backbone.GCN.value, seed))
            if a is None or b is None or name not in a.per_run or name not in b.per_run:
                deltas.append("failed")
            else:
                deltas.append(_fmt(a.metric(name) - b.metric(name)))
        numeric = [float(d) for d in deltas if d != "failed"]
        mean = _fmt(float(np.mean(numeric))) if numeric else "failed"
        lines.append(f"| {name} | " + " | ".join(deltas) + f" | {mean} |")

    if result.failures:
        lines += ["", "## Failures", ""]
        for (backbone, seed), msg in sorted(result.failures.items()):
            lines.append(f"- {backbone} seed {seed}: {msg}")
    return "\n".join(lines) + "\n"
