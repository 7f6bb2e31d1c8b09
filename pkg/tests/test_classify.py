"""Classification pipeline: per-second pooling, causal normalization,
random-walk smoothing against a batch least-squares oracle, and the MLP
head with its weight-decay search."""

import math

import numpy as np
import pytest
from scipy.special import log_softmax

from daest.classify import (
    ClassifyError,
    FeatureSeries,
    LdsParams,
    NormState,
    TrainConfig,
    adaptive_normalize,
    init_classifier_params,
    lds_smooth,
    majority_vote,
    mlp_logits,
    per_second_features,
    predict,
    predict_proba,
    prepare_subject_features,
    stack_features,
    train_classifier,
)
from daest.classify import _cross_entropy
from daest.dataio import SubjectData, Trial
from daest.encoder import EncoderGeometry, init_encoder_params
from daest.ndcore import grad_check


# ---------------------------------------------------------------------------
# per-second pooling


def test_per_second_means_oracle():
    latent = np.arange(20, dtype=float).reshape(2, 10)
    out = per_second_features(latent, fs=4)
    # two full seconds; the trailing 2 samples are dropped
    expected = np.array([[1.5, 5.5], [11.5, 15.5]])
    np.testing.assert_allclose(out, expected)


def test_per_second_exact_division():
    latent = np.random.default_rng(0).standard_normal((3, 12))
    out = per_second_features(latent, fs=3)
    assert out.shape == (3, 4)
    np.testing.assert_allclose(out[:, 1], latent[:, 3:6].mean(axis=1))


def test_per_second_validation():
    with pytest.raises(ClassifyError):
        per_second_features(np.zeros((2, 3)), fs=4)  # under one second
    with pytest.raises(ClassifyError):
        per_second_features(np.zeros(8), fs=4)
    with pytest.raises(ClassifyError):
        per_second_features(np.zeros((2, 8)), fs=0)


# ---------------------------------------------------------------------------
# causal normalization


def direct_normalize(feats, eps=1e-6):
    out = np.empty(feats.shape, dtype=float)
    for t in range(feats.shape[1]):
        seen = feats[:, : t + 1]
        m = seen.mean(axis=1)
        sd = seen.std(axis=1)  # population std including the current sample
        out[:, t] = (feats[:, t] - m) / (sd + eps)
    return out


def test_adaptive_normalize_matches_direct_cumulative():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((5, 40)) * 3.0 + 1.0
    got = adaptive_normalize(feats, NormState(n_features=5))
    np.testing.assert_allclose(got, direct_normalize(feats), atol=1e-10)


def test_adaptive_normalize_first_second_is_zero():
    feats = np.random.default_rng(2).standard_normal((4, 6))
    out = adaptive_normalize(feats, NormState(n_features=4))
    np.testing.assert_array_equal(out[:, 0], np.zeros(4))
    assert np.any(out[:, 1:] != 0)


def test_adaptive_normalize_state_persists_across_trials():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((3, 30))
    whole = adaptive_normalize(feats, NormState(n_features=3))
    state = NormState(n_features=3)
    part = np.concatenate(
        [adaptive_normalize(feats[:, :12], state),
         adaptive_normalize(feats[:, 12:], state)],
        axis=1,
    )
    np.testing.assert_allclose(part, whole, atol=1e-12)


def test_adaptive_normalize_converges_to_z_scores():
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((2, 5000)) * 2.5 + 7.0
    out = adaptive_normalize(feats, NormState(n_features=2))
    tail = out[:, 1000:]
    np.testing.assert_allclose(tail.mean(axis=1), 0.0, atol=0.1)
    np.testing.assert_allclose(tail.std(axis=1), 1.0, atol=0.1)


def test_adaptive_normalize_shape_mismatch():
    with pytest.raises(ClassifyError):
        adaptive_normalize(np.zeros((3, 4)), NormState(n_features=2))


# ---------------------------------------------------------------------------
# smoothing


def gls_smooth(y, q, r):
    """Batch solution of the random-walk smoother with a diffuse start."""
    s = y.shape[-1]
    diff = np.diff(np.eye(s), axis=0)
    a = np.eye(s) + (r / q) * (diff.T @ diff)
    return np.linalg.solve(a, y.T).T


@pytest.mark.parametrize("q,r", [(0.1, 0.1), (0.5, 0.05), (0.01, 1.0), (2.0, 3.0)])
def test_lds_matches_batch_least_squares(q, r):
    rng = np.random.default_rng(5)
    y = rng.standard_normal((4, 37))
    got = lds_smooth(y, LdsParams(q=q, r=r))
    np.testing.assert_allclose(got, gls_smooth(y, q, r), atol=1e-9)


def test_lds_zero_observation_noise_is_identity():
    y = np.random.default_rng(6).standard_normal((3, 20))
    np.testing.assert_array_equal(lds_smooth(y, LdsParams(q=0.1, r=0.0)), y)


def test_lds_single_second_is_identity():
    y = np.random.default_rng(7).standard_normal((3, 1))
    np.testing.assert_array_equal(lds_smooth(y, LdsParams()), y)


def test_lds_huge_process_noise_tracks_observations():
    y = np.random.default_rng(8).standard_normal((2, 25))
    got = lds_smooth(y, LdsParams(q=1e9, r=0.1))
    np.testing.assert_allclose(got, y, atol=1e-6)


def test_lds_tiny_process_noise_averages():
    y = np.random.default_rng(9).standard_normal((2, 30))
    got = lds_smooth(y, LdsParams(q=1e-10, r=1.0))
    np.testing.assert_allclose(got, np.tile(y.mean(axis=1, keepdims=True), 30), atol=1e-3)


def test_lds_constant_series_unchanged():
    y = np.full((3, 15), 2.5)
    np.testing.assert_allclose(lds_smooth(y, LdsParams(q=0.3, r=0.7)), y, atol=1e-12)


def test_lds_rows_independent():
    rng = np.random.default_rng(10)
    y = rng.standard_normal((5, 22))
    whole = lds_smooth(y, LdsParams(q=0.2, r=0.4))
    rows = np.vstack([lds_smooth(y[i : i + 1], LdsParams(q=0.2, r=0.4)) for i in range(5)])
    np.testing.assert_allclose(whole, rows, atol=1e-12)


def test_lds_validation():
    with pytest.raises(ClassifyError):
        LdsParams(q=-1.0)
    with pytest.raises(ClassifyError):
        lds_smooth(np.zeros((2, 0)))
    with pytest.raises(ClassifyError):
        lds_smooth(np.zeros(5))


# ---------------------------------------------------------------------------
# feature extraction end to end


def toy_geometry():
    return EncoderGeometry(
        n_channels=6,
        n_samples=64,
        fs=32,
        n_temporal=2,
        temporal_len=5,
        n_spatial_per_temporal=2,
        transition_steps=2,
        dilation_schedule=((1, 2), (2, 2)),
        attention_len=3,
        activation="sigmoid",
    )


def toy_subject(seed=0, n_trials=3, trial_len_s=4):
    rng = np.random.default_rng(seed)
    trials = [
        Trial(
            stimulus_id=f"stim{j}",
            label=j % 2,
            data=rng.standard_normal((6, trial_len_s * 32)),
        )
        for j in range(n_trials)
    ]
    return SubjectData(subject_id=f"sub{seed}", trials=trials)


def test_prepare_subject_features_shapes_and_state():
    geom = toy_geometry()
    enc = init_encoder_params(geom, np.random.default_rng(0))
    series = prepare_subject_features(toy_subject(), enc, geom, fs=32)
    assert len(series) == 3
    for fs_ in series:
        assert fs_.values.shape == (geom.n_latent, 4)
    # normalization state persists: only the very first second of the first
    # trial is guaranteed near zero before smoothing mixes it
    later = series[1].values
    assert np.any(np.abs(later[:, 0]) > 1e-9)
    assert series[0].subject_id == "sub0"
    assert series[0].label == 0 and series[1].label == 1


def test_prepare_subject_features_deterministic():
    geom = toy_geometry()
    enc = init_encoder_params(geom, np.random.default_rng(0))
    a = prepare_subject_features(toy_subject(), enc, geom, fs=32)
    b = prepare_subject_features(toy_subject(), enc, geom, fs=32)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.values, fb.values)


def test_stack_features_alignment():
    geom = toy_geometry()
    enc = init_encoder_params(geom, np.random.default_rng(0))
    series = prepare_subject_features(toy_subject(), enc, geom, fs=32)
    x, y, subjects = stack_features(series)
    assert x.shape == (12, geom.n_latent)
    np.testing.assert_array_equal(y, [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0])
    assert set(subjects.tolist()) == {"sub0"}
    np.testing.assert_allclose(x[4], series[1].values[:, 0])


def test_feature_series_labels():
    fs_ = FeatureSeries(np.zeros((3, 5)), "s", "stim", label=2)
    assert fs_.n_seconds == 5
    np.testing.assert_array_equal(fs_.per_second_labels(), [2] * 5)


# ---------------------------------------------------------------------------
# the MLP head


def test_classifier_param_count():
    params = init_classifier_params(
        256, 9, (128, 64), np.random.default_rng(0)
    )
    expected = 256 * 128 + 128 + 128 * 64 + 64 + 64 * 9 + 9
    assert params.n_params == expected
    assert params.n_features == 256
    assert params.n_classes == 9


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((10, 4)) * 3
    labels = rng.integers(0, 4, size=10)
    from daest.ndcore import DiffTensor

    got = float(_cross_entropy(DiffTensor.constant(logits), labels).values)
    expected = -log_softmax(logits, axis=1)[np.arange(10), labels].mean()
    assert abs(got - expected) < 1e-10


def test_mlp_gradient():
    rng = np.random.default_rng(12)
    labels = rng.integers(0, 3, size=6)

    def f(leaf):
        params = init_classifier_params(5, 3, (4, 4), np.random.default_rng(1),
                                        tape=leaf.tape)
        return _cross_entropy(mlp_logits(leaf, params), labels)

    err = grad_check(f, rng.standard_normal((6, 5)), coords=15, rng=rng)
    assert err < 1e-6


def test_predict_proba_rows_sum_to_one():
    rng = np.random.default_rng(13)
    params = init_classifier_params(4, 3, (8, 8), rng)
    probs = predict_proba(rng.standard_normal((7, 4)), params)
    assert probs.shape == (7, 3)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(7), atol=1e-12)
    assert np.all(probs >= 0)


def test_predict_shape_guard():
    params = init_classifier_params(4, 3, (8, 8), np.random.default_rng(0))
    with pytest.raises(ClassifyError):
        predict(np.zeros((5, 3)), params)


def blobs(n_per_class=60, n_subjects=4, dim=4, sep=2.0, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys, subs = [], [], []
    for c in range(2):
        center = np.full(dim, sep if c else -sep)
        x = center + rng.standard_normal((n_per_class, dim))
        xs.append(x)
        ys.append(np.full(n_per_class, c))
        subs.append(rng.choice([f"s{i}" for i in range(n_subjects)], size=n_per_class))
    return np.vstack(xs), np.concatenate(ys), np.concatenate(subs)


def fast_config(**kw):
    base = dict(lr=2e-2, weight_decay_grid=(0.001,), epochs=40, patience=10,
                batch_size=64, hidden=(16, 8), cv_folds=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_classifier_separable_blobs():
    x, y, subs = blobs()
    params = train_classifier(x, y, subs, n_classes=2, config=fast_config())
    acc = float(np.mean(predict(x, params) == y))
    assert acc >= 0.95


def test_train_classifier_weight_decay_search():
    x, y, subs = blobs(n_per_class=40)
    config = fast_config(weight_decay_grid=(0.001, 0.025), epochs=25)
    params = train_classifier(x, y, subs, n_classes=2, config=config)
    assert params.weight_decay in config.weight_decay_grid
    acc = float(np.mean(predict(x, params) == y))
    assert acc >= 0.9


def test_train_classifier_deterministic():
    x, y, subs = blobs(n_per_class=30)
    p1 = train_classifier(x, y, subs, n_classes=2, config=fast_config(epochs=10))
    p2 = train_classifier(x, y, subs, n_classes=2, config=fast_config(epochs=10))
    for a, b in zip(p1.tensors(), p2.tensors()):
        np.testing.assert_array_equal(a.values, b.values)


def test_train_classifier_single_class_error():
    x = np.zeros((10, 3))
    y = np.zeros(10, dtype=int)
    subs = np.array(["a"] * 5 + ["b"] * 5, dtype=object)
    with pytest.raises(ClassifyError, match="single class"):
        train_classifier(x, y, subs, n_classes=2, config=fast_config())


def test_train_classifier_validation():
    x, y, subs = blobs(n_per_class=10)
    with pytest.raises(ClassifyError):
        train_classifier(x[:5], y, subs, n_classes=2, config=fast_config())
    with pytest.raises(ClassifyError):
        train_classifier(x, y + 5, subs, n_classes=2, config=fast_config())
    with pytest.raises(ClassifyError):
        train_classifier(x, y, subs, n_classes=2,
                         config=fast_config(weight_decay_grid=()))


def test_majority_vote():
    x, y, subs = blobs()
    params = train_classifier(x, y, subs, n_classes=2, config=fast_config())
    rng = np.random.default_rng(20)
    series = FeatureSeries(
        values=(np.full(4, -2.0)[:, None] + 0.5 * rng.standard_normal((4, 9))),
        subject_id="s0",
        stimulus_id="stim0",
        label=0,
    )
    assert majority_vote(series, params) == 0
    series.values = -series.values
    assert majority_vote(series, params) == 1
