"""Outlier-channel prediction tests: the constructed success and failure
instances, calibration-freeness, and monotonicity in k."""

from types import SimpleNamespace

import numpy as np
import pytest

from xcache.analysis import (
    evaluate_prediction,
    ground_truth_channel,
    latent_stats,
    make_dominant_instance,
    make_failure_instance,
    predict_outlier_channels,
)
from xcache.errors import ConfigError, DataError, ShapeError
from xcache.linalg import SvdFactors, svd_thin


def fake_model(pairs):
    """Duck-typed model exposing per-layer K projections and factors."""
    layers = [
        SimpleNamespace(w_k=w, svd_k=svd_thin(w)) for w, _ in pairs
    ]
    return SimpleNamespace(layers=layers)


class TestLatentStats:
    def test_single_basis_column(self):
        x = np.array([[1.0, 2.0], [3.0, -4.0]])
        stats = latent_stats(x, np.array([[1.0], [0.0]]))
        assert stats.mean_abs.shape == (1,)
        assert stats.mean_abs[0] == 2.0
        assert stats.argmax == 0

    def test_constructed_dominance(self):
        w, x, _ = make_dominant_instance(0)
        f = svd_thin(w)
        stats = latent_stats(x, f.u)
        assert stats.argmax == 0

    def test_zero_matrix(self):
        stats = latent_stats(np.zeros((4, 6)), np.eye(6))
        assert np.all(stats.mean_abs == 0)
        assert stats.argmax == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            latent_stats(np.zeros((2, 3)), np.zeros((4, 4)))


class TestPredict:
    def test_identity_right_factor(self):
        f = SvdFactors(u=np.eye(3), sigma=np.ones(3), b_t=np.eye(3))
        assert predict_outlier_channels(f, 1).indices == [0]

    def test_direct_argmax(self):
        b_t = np.array([[0.1, 0.9, 0.2], [0.9, -0.1, 0.3], [0.2, 0.3, 0.9]])
        f = SvdFactors(u=np.eye(3), sigma=np.ones(3), b_t=b_t)
        assert predict_outlier_channels(f, 1).indices == [1]
        assert predict_outlier_channels(f, 3).indices == [1, 2, 0]

    def test_empty_prediction(self):
        f = SvdFactors(u=np.eye(2), sigma=np.ones(2), b_t=np.eye(2))
        assert predict_outlier_channels(f, 0).indices == []

    def test_k_bounds(self):
        f = SvdFactors(u=np.eye(2), sigma=np.ones(2), b_t=np.eye(2))
        with pytest.raises(ConfigError):
            predict_outlier_channels(f, 3)

    def test_tie_breaks_low_index(self):
        b_t = np.array([[0.5, 0.5], [0.5, -0.5]]) * np.sqrt(2)
        f = SvdFactors(u=np.eye(2), sigma=np.ones(2), b_t=b_t)
        assert predict_outlier_channels(f, 2).indices == [0, 1]


class TestConstructedInstances:
    def test_dominant_instances_all_hit(self):
        for seed in range(50):
            w, x, expected = make_dominant_instance(seed)
            pred = predict_outlier_channels(svd_thin(w), 1)
            assert ground_truth_channel(x, w) == expected
            assert pred.indices[0] == expected

    def test_failure_instances_miss_top1(self):
        for seed in range(10):
            w, x, true_channel = make_failure_instance(seed)
            pred = predict_outlier_channels(svd_thin(w), 1)
            assert ground_truth_channel(x, w) == true_channel
            assert pred.indices[0] != true_channel

    def test_failure_premise_still_holds(self):
        # The first latent channel still dominates even when the top-1
        # prediction misses: this is the documented limitation, not noise.
        w, x, _ = make_failure_instance(3)
        stats = latent_stats(x, svd_thin(w).u)
        assert stats.argmax == 0


class TestEvaluate:
    def test_constructed_layers_k1(self):
        pairs = [make_dominant_instance(s)[:2] for s in range(8)]
        m = fake_model(pairs)
        data = [x for _, x in pairs]
        assert evaluate_prediction(m, data, 1) == 1.0

    def test_full_width_always_hits(self):
        pairs = [make_failure_instance(s)[:2] for s in range(4)]
        m = fake_model(pairs)
        data = [x for _, x in pairs]
        width = m.layers[0].svd_k.b_t.shape[1]
        assert evaluate_prediction(m, data, width) == 1.0

    def test_k_zero_is_zero(self):
        pairs = [make_dominant_instance(s)[:2] for s in range(3)]
        assert evaluate_prediction(fake_model(pairs), [x for _, x in pairs], 0) == 0.0

    def test_monotone_in_k(self):
        pairs = [make_failure_instance(s)[:2] for s in range(6)]
        m = fake_model(pairs)
        data = [x for _, x in pairs]
        accs = [evaluate_prediction(m, data, k) for k in range(0, 8)]
        assert all(b >= a for a, b in zip(accs, accs[1:]))

    def test_predictions_are_data_invariant(self):
        # Calibration-free: the predicted indices depend on the weights only.
        w, x, _ = make_dominant_instance(1)
        f = svd_thin(w)
        before = predict_outlier_channels(f, 4).indices
        rng = np.random.default_rng(0)
        other_data = rng.normal(size=x.shape)
        m = fake_model([(w, x)])
        evaluate_prediction(m, [other_data], 4)
        assert predict_outlier_channels(m.layers[0].svd_k, 4).indices == before

    def test_empty_layer_set(self):
        with pytest.raises(DataError):
            evaluate_prediction(fake_model([]), [], 1)
