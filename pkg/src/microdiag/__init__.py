"""Synthetic microservice fault diagnosis toolkit.

Simulates multimodal telemetry (metrics, logs, traces) for a service
dependency graph under injected faults, preprocesses it into aligned
per-node windows, embeds each modality, and trains either a
topology-agnostic MLP or a graph-convolution backbone in the same pipeline
slot so the two can be compared fairly.
"""

from .types import (
    AlertDirection,
    AlertSource,
    Backbone,
    DatasetSplit,
    DiagnosisWindow,
    FaultSpec,
    FaultType,
    NodeFeatures,
    NodeSegments,
    RunConfig,
    ServiceGraph,
    Span,
    Task,
    TelemetryStream,
)
from .prng import Prng, prng_new
from .simulator import ScenarioSpec, generate_topology, scenario_preset, schedule_faults, simulate
from .templates import TemplateTable, mine_templates, template_series
from .preprocess import (
    AlertEvent,
    Transforms,
    apply_transforms,
    fit_transforms,
    plan_windows,
    preprocess_stream,
    three_sigma_alerts,
    window_label,
    windows_from_bytes,
    windows_to_bytes,
)
from .embed import embed_window, encode_events, encode_timeseries, init_encoder_params
from .models import (
    count_params,
    diagmlp_forward,
    fusion_mlp,
    gcn_forward,
    init_params,
    normalized_adjacency,
)
from .train_eval import (
    DatasetBundle,
    MetricsReport,
    SeparabilityMode,
    ablate,
    evaluate_classification,
    evaluate_detection,
    evaluate_localization,
    pca_2d,
    prepare_dataset,
    separability_report,
    silhouette_score,
    topk_accuracy,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlertDirection", "AlertSource", "Backbone", "DatasetSplit",
    "DiagnosisWindow", "FaultSpec", "FaultType", "NodeFeatures",
    "NodeSegments", "RunConfig", "ServiceGraph", "Span", "Task",
    "TelemetryStream",
    "Prng", "prng_new",
    "ScenarioSpec", "generate_topology", "scenario_preset", "schedule_faults",
    "simulate",
    "TemplateTable", "mine_templates", "template_series",
    "AlertEvent", "Transforms", "apply_transforms", "fit_transforms",
    "plan_windows", "preprocess_stream", "three_sigma_alerts", "window_label",
    "windows_from_bytes", "windows_to_bytes",
    "embed_window", "encode_events", "encode_timeseries", "init_encoder_params",
    "count_params", "diagmlp_forward", "fusion_mlp", "gcn_forward",
    "init_params", "normalized_adjacency",
    "DatasetBundle", "MetricsReport", "SeparabilityMode", "ablate",
    "evaluate_classification", "evaluate_detection", "evaluate_localization",
    "pca_2d", "prepare_dataset", "separability_report", "silhouette_score",
    "topk_accuracy", "train",
    "__version__",
]
