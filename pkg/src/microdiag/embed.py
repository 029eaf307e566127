"""Per-modality trainable encoders producing d-dimensional node features.

Time-series segments (metric channels, template counts, trace statistics)
pass through a small causal temporal-convolution encoder: two valid 1-D
convolutions with ReLU, global mean-pool over time, affine projection to
R^d. Alert sequences pass through a bag-of-tokens embedding: mean of
vocabulary rows (reserved EMPTY row for empty sequences, UNK for unseen
tokens) followed by an affine projection. A node's trace feature is the sum
of its latency-series encoding and its alert-sequence encoding.

Everything is differentiable through the autodiff tape; parameters live in a
flat name -> f64 array dict shared with the model backbones.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .prng import Prng
from .types import NodeFeatures

__all__ = [
    "TCN_HIDDEN",
    "KERNEL_WIDTH",
    "EMPTY_ID",
    "UNK_ID",
    "init_encoder_params",
    "uniform_init",
    "encode_timeseries",
    "encode_events",
    "embed_window",
    "event_weights",
    "encoder_graph",
]

TCN_HIDDEN = 16
KERNEL_WIDTH = 3
# Vocabulary rows reserved by the preprocess stage.
EMPTY_ID = 0
UNK_ID = 1


def uniform_init(prng: Prng, name: str, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return prng.child(f"init/{name}").uniform(-bound, bound, size=shape)


def init_encoder_params(
    prng: Prng,
    d: int,
    metric_channels: int,
    log_channels: int,
    trace_channels: int,
    vocab_size: int,
    tcn_hidden: int = TCN_HIDDEN,
) -> dict[str, np.ndarray]:
    """Fresh encoder parameters; each tensor from its own named PRNG stream
    so shared tensors are identical across model variants."""
    params: dict[str, np.ndarray] = {}
    for prefix, c_in in (
        ("enc_metric", metric_channels),
        ("enc_log", log_channels),
        ("enc_trace", trace_channels),
    ):
        for name, shape, fan in (
            (f"{prefix}/conv1_w", (tcn_hidden, c_in, KERNEL_WIDTH), c_in * KERNEL_WIDTH),
            (f"{prefix}/conv1_b", (tcn_hidden,), c_in * KERNEL_WIDTH),
            (f"{prefix}/conv2_w", (tcn_hidden, tcn_hidden, KERNEL_WIDTH), tcn_hidden * KERNEL_WIDTH),
            (f"{prefix}/conv2_b", (tcn_hidden,), tcn_hidden * KERNEL_WIDTH),
            (f"{prefix}/proj_w", (d, tcn_hidden), tcn_hidden),
            (f"{prefix}/proj_b", (d,), tcn_hidden),
        ):
            params[name] = uniform_init(prng, name, shape, fan)
    for name, shape, fan in (
        ("event_embed/table", (vocab_size, d), d),
        ("event_embed/proj_w", (d, d), d),
        ("event_embed/proj_b", (d,), d),
    ):
        params[name] = uniform_init(prng, name, shape, fan)
    return params


def _transpose(t: ad.Tensor) -> ad.Tensor:
    return ad.Tensor(t.data.T, (t,), lambda g: (g.T,))


def encoder_graph(x: ad.Tensor, p: dict[str, ad.Tensor], prefix: str) -> ad.Tensor:
    """TCN over a (B, C, T) tensor -> (B, d); the tape-graph building block."""
    h = ad.relu(ad.conv1d_valid(x, p[f"{prefix}/conv1_w"], p[f"{prefix}/conv1_b"]))
    h = ad.relu(ad.conv1d_valid(h, p[f"{prefix}/conv2_w"], p[f"{prefix}/conv2_b"]))
    pooled = ad.tmean(h, axis=2)  # (B, hidden)
    return ad.add(ad.matmul(pooled, _transpose(p[f"{prefix}/proj_w"])), p[f"{prefix}/proj_b"])


def event_weights(alert_ids_per_row, vocab_size: int) -> np.ndarray:
    """Normalized token-count rows for a batch of alert sequences; an empty
    sequence becomes a one-hot on the EMPTY token."""
    w = np.zeros((len(alert_ids_per_row), vocab_size))
    for r, ids in enumerate(alert_ids_per_row):
        if not ids:
            w[r, EMPTY_ID] = 1.0
        else:
            for i in ids:
                if not (0 <= i < vocab_size):
                    raise ValueError(f"alert token id {i} outside vocabulary of {vocab_size}")
                w[r, i] += 1.0
            w[r] /= len(ids)
    return w


def events_graph(weights: np.ndarray, p: dict[str, ad.Tensor]) -> ad.Tensor:
    """Bag-of-tokens encoding for precomputed weight rows -> (B, d)."""
    pooled = ad.matmul(ad.constant(weights), p["event_embed/table"])
    return ad.add(
        ad.matmul(pooled, _transpose(p["event_embed/proj_w"])),
        p["event_embed/proj_b"],
    )


def _wrap_params(params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {name: ad.parameter(arr) for name, arr in params.items()}


def encode_timeseries(segment: np.ndarray, params: dict[str, np.ndarray],
                      prefix: str) -> np.ndarray:
    """Encode one (channels, T) segment to R^d."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2:
        raise ValueError("segment must be a channels x T matrix")
    if segment.shape[1] < KERNEL_WIDTH:
        raise ValueError(
            f"segment length {segment.shape[1]} shorter than kernel width {KERNEL_WIDTH}"
        )
    out = encoder_graph(ad.constant(segment[None]), _wrap_params(params), prefix)
    return out.data[0]


def encode_events(alert_ids, params: dict[str, np.ndarray], vocab_size: int) -> np.ndarray:
    """Encode one alert id sequence to R^d."""
    w = event_weights([tuple(alert_ids)], vocab_size)
    return events_graph(w, _wrap_params(params)).data[0]


def embed_window(segments, params: dict[str, np.ndarray], vocab_size: int) -> list[NodeFeatures]:
    """Per-node d-vectors for one window; node i depends only on node i's
    segments."""
    p = _wrap_params(params)
    out = []
    for seg in segments:
        x_metric = encoder_graph(ad.constant(seg.metric[None]), p, "enc_metric").data[0]
        x_log = encoder_graph(ad.constant(seg.log[None]), p, "enc_log").data[0]
        trace_ts = encoder_graph(ad.constant(seg.trace[None]), p, "enc_trace").data[0]
        trace_ev = events_graph(event_weights([seg.alerts], vocab_size), p).data[0]
        out.append(NodeFeatures(x_metric=x_metric, x_log=x_log, x_trace=trace_ts + trace_ev))
    return out
