"""Modality encoders: TCN time-series path and bag-of-tokens event path."""

import numpy as np
import pytest

from microdiag import autodiff as ad
from microdiag.embed import (
    EMPTY_ID,
    KERNEL_WIDTH,
    UNK_ID,
    embed_window,
    encode_events,
    encode_timeseries,
    encoder_graph,
    event_weights,
    events_graph,
    init_encoder_params,
    uniform_init,
)
from microdiag.prng import prng_new
from microdiag.types import NodeSegments


D, VOCAB = 3, 6


@pytest.fixture(scope="module")
def params():
    return init_encoder_params(
        prng_new(42).child("init"), d=D, metric_channels=2, log_channels=4,
        trace_channels=3, vocab_size=VOCAB, tcn_hidden=4,
    )


class TestInit:
    def test_named_streams_are_order_independent(self):
        a = uniform_init(prng_new(0), "enc_metric/conv1_w", (2, 2, 3), 6)
        _ = uniform_init(prng_new(0), "enc_log/conv1_w", (5, 5), 25)
        b = uniform_init(prng_new(0), "enc_metric/conv1_w", (2, 2, 3), 6)
        assert np.array_equal(a, b)

    def test_bound_follows_fan_in(self):
        arr = uniform_init(prng_new(1), "w", (2000,), 16)
        assert np.abs(arr).max() <= 0.25
        assert np.abs(arr).max() > 0.2  # actually fills the range

    def test_shared_tensors_identical_across_widths(self, params):
        # a variant with a different head keeps byte-identical encoders as
        # long as the per-tensor init streams are named, not positional
        again = init_encoder_params(
            prng_new(42).child("init"), d=D, metric_channels=2, log_channels=4,
            trace_channels=3, vocab_size=VOCAB, tcn_hidden=4,
        )
        for k, v in params.items():
            assert np.array_equal(v, again[k]), k


class TestTimeseriesEncoder:
    def test_too_short_segment_rejected(self, params):
        with pytest.raises(ValueError, match="shorter than kernel"):
            encode_timeseries(np.zeros((2, KERNEL_WIDTH - 1)), params, "enc_metric")
        with pytest.raises(ValueError, match="channels x T"):
            encode_timeseries(np.zeros(7), params, "enc_metric")

    def test_constant_series_is_length_invariant(self, params):
        # mean-pool over time: a flat series encodes identically at any
        # length once both convolutions fit
        base = encode_timeseries(np.full((2, 8), 1.7), params, "enc_metric")
        long = encode_timeseries(np.full((2, 50), 1.7), params, "enc_metric")
        np.testing.assert_allclose(base, long, atol=1e-12)
        assert base.shape == (D,)

    def test_output_depends_on_input(self, params):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 12))
        a = encode_timeseries(x, params, "enc_metric")
        b = encode_timeseries(x + 0.5, params, "enc_metric")
        assert not np.allclose(a, b)

    def test_gradients_match_fd_through_encoder(self, params):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 9))
        weights = rng.normal(size=(1, D))
        arrays = {k: v.copy() for k, v in params.items() if k.startswith("enc_metric")}

        def make_loss():
            p = {k: ad.parameter(v) for k, v in arrays.items()}
            out = encoder_graph(ad.constant(x[None]), p, "enc_metric")
            return ad.tsum(ad.mul(out, ad.constant(weights)))

        tensors = {k: ad.parameter(v) for k, v in arrays.items()}
        out = encoder_graph(ad.constant(x[None]), tensors, "enc_metric")
        ad.backward(ad.tsum(ad.mul(out, ad.constant(weights))))
        fd = ad.finite_difference(lambda: float(make_loss().data), arrays)
        for k in arrays:
            err = np.abs(tensors[k].grad - fd[k]).max()
            scale = np.abs(fd[k]).max() + 1e-8
            assert err / scale < 1e-4, k


class TestEventEncoder:
    def test_weight_rows_hand_arithmetic(self):
        w = event_weights([(2, 2, 5), (), (4,)], VOCAB)
        assert w.shape == (3, VOCAB)
        assert w[0].tolist() == [0, 0, 2 / 3, 0, 0, 1 / 3]
        assert w[1].tolist() == [1, 0, 0, 0, 0, 0]  # EMPTY one-hot
        assert w[2, 4] == 1.0 and w[2].sum() == 1.0
        assert EMPTY_ID == 0 and UNK_ID == 1

    def test_repeated_token_normalizes_to_single(self, params):
        a = encode_events([3, 3], params, VOCAB)
        b = encode_events([3], params, VOCAB)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_empty_sequence_uses_empty_row(self, params):
        a = encode_events([], params, VOCAB)
        b = encode_events([EMPTY_ID], params, VOCAB)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_out_of_vocab_id_rejected(self):
        with pytest.raises(ValueError, match="outside vocabulary"):
            event_weights([(VOCAB,)], VOCAB)

    def test_gradients_match_fd_through_bag(self, params):
        rng = np.random.default_rng(2)
        weights = event_weights([(1, 2), (0,)], VOCAB)
        readout = rng.normal(size=(2, D))
        arrays = {k: v.copy() for k, v in params.items() if k.startswith("event_embed")}

        tensors = {k: ad.parameter(v) for k, v in arrays.items()}
        ad.backward(ad.tsum(ad.mul(events_graph(weights, tensors), ad.constant(readout))))

        def loss():
            p = {k: ad.parameter(v) for k, v in arrays.items()}
            return float(ad.tsum(ad.mul(events_graph(weights, p), ad.constant(readout))).data)

        fd = ad.finite_difference(loss, arrays)
        for k in arrays:
            np.testing.assert_allclose(tensors[k].grad, fd[k], rtol=1e-5, atol=1e-7,
                                       err_msg=k)


class TestEmbedWindow:
    def make_segments(self, rng, n=2, T=10):
        return [
            NodeSegments(
                metric=rng.normal(size=(2, T)),
                log=rng.integers(0, 3, size=(4, T)).astype(float),
                trace=rng.normal(size=(3, T)),
                alerts=(2, 4) if i == 0 else (),
            )
            for i in range(n)
        ]

    def test_trace_feature_is_sum_of_series_and_events(self, params):
        rng = np.random.default_rng(3)
        segs = self.make_segments(rng)
        feats = embed_window(segs, params, VOCAB)
        for seg, f in zip(segs, feats):
            ts = encode_timeseries(seg.trace, params, "enc_trace")
            ev = encode_events(seg.alerts, params, VOCAB)
            np.testing.assert_allclose(f.x_trace, ts + ev, atol=1e-12)
            np.testing.assert_allclose(
                f.x_metric, encode_timeseries(seg.metric, params, "enc_metric"),
                atol=1e-12,
            )
            assert f.d == D

    def test_node_features_are_local(self, params):
        rng = np.random.default_rng(4)
        segs = self.make_segments(rng)
        before = embed_window(segs, params, VOCAB)
        # perturb node 1 only; node 0's features must be bit-identical
        segs2 = [segs[0], NodeSegments(metric=segs[1].metric + 5.0, log=segs[1].log,
                                       trace=segs[1].trace, alerts=segs[1].alerts)]
        after = embed_window(segs2, params, VOCAB)
        assert before[0] == after[0]
        assert not np.allclose(before[1].x_metric, after[1].x_metric)
