"""Interpretability: path-integral attributions and their completeness,
forward-model spatial patterns, kernel spectra, cross-class correlation,
and per-dimension reports."""

import json

import numpy as np
import pytest

from daest import ndcore as nd
from daest.classify import init_classifier_params, mlp_logits
from daest.encoder import (
    EncoderGeometry,
    init_encoder_params,
    kernel_groups,
    per_kernel_dilations,
)
from daest.interpret import (
    AttributionMatrix,
    DimensionReport,
    InterpretError,
    compute_attributions,
    contribution_correlation,
    estimate_stream_covariances,
    filter_frequency_response,
    integrated_gradients,
    path_attributions,
    spatial_activation,
    top_dimension_report,
    window_attention,
)
from daest.ndcore import DiffTensor


def logit_value(params, x, c):
    out = mlp_logits(DiffTensor.constant(np.asarray(x, float)[None, :]), params.detached())
    return float(out.values[0, c])


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


# ---------------------------------------------------------------------------
# path attributions


def test_path_attributions_linear_exact():
    w = np.array([2.0, -1.0, 0.5, 3.0])
    x = np.array([1.0, 4.0, -2.0, 0.25])
    got = path_attributions(lambda pts: np.tile(w, (pts.shape[0], 1)), x, steps=32)
    np.testing.assert_allclose(got, w * x, atol=1e-14)


def test_path_attributions_at_baseline_zero():
    x = np.array([1.5, -0.5])
    got = path_attributions(lambda pts: pts * 2, x, baseline=x.copy(), steps=32)
    np.testing.assert_array_equal(got, np.zeros(2))


def test_path_attributions_midpoint_is_exact_for_quadratics():
    # grad of sum(x^2) is 2x, linear along the path, so midpoint quadrature
    # integrates it exactly: attribution_i = x_i^2
    x = np.array([3.0, -2.0, 0.5])
    got = path_attributions(lambda pts: 2 * pts, x, steps=1)
    np.testing.assert_allclose(got, x**2, atol=1e-13)


def test_path_attributions_cubic_completeness():
    # F = sum(x^3): exact attributions are x_i^3
    x = np.array([1.0, -1.5, 0.7, 2.0])
    got = path_attributions(lambda pts: 3 * pts**2, x, steps=256)
    assert abs(got.sum() - np.sum(x**3)) < 1e-3
    np.testing.assert_allclose(got, x**3, rtol=1e-4)


def test_path_attributions_validation():
    x = np.zeros(3)
    with pytest.raises(InterpretError):
        path_attributions(lambda pts: pts, x, steps=0)
    with pytest.raises(InterpretError):
        path_attributions(lambda pts: pts, x, baseline=np.zeros(4))
    with pytest.raises(InterpretError):
        path_attributions(lambda pts: pts[:, :2], x)


# ---------------------------------------------------------------------------
# integrated gradients on the MLP


def test_ig_completeness_on_mlp():
    rng = np.random.default_rng(0)
    params = init_classifier_params(6, 3, (8, 8), rng)
    x = rng.standard_normal(6)
    for c in range(3):
        attr = integrated_gradients(params, x, target=c, steps=256)
        total = logit_value(params, x, c) - logit_value(params, np.zeros(6), c)
        assert abs(attr.sum() - total) < 1e-3


def test_ig_exact_on_linear_regime_mlp():
    # biases large enough that every ReLU stays active along the whole
    # integration path: the network is affine there, so midpoint IG is exact
    rng = np.random.default_rng(1)
    params = init_classifier_params(5, 2, (6, 6), rng)
    for w in params.weights:
        w.values[...] = 0.01 * rng.standard_normal(w.shape)
    for b in params.biases[:-1]:
        b.values[...] = 5.0
    x = rng.standard_normal(5)
    attr = integrated_gradients(params, x, target=0, steps=32)
    total = logit_value(params, x, 0) - logit_value(params, np.zeros(5), 0)
    assert abs(attr.sum() - total) < 1e-10
    # the affine map's input weights are the product of the three layers
    eff = params.weights[0].values @ params.weights[1].values @ params.weights[2].values
    np.testing.assert_allclose(attr, eff[:, 0] * x, atol=1e-10)


def test_ig_validation():
    params = init_classifier_params(4, 2, (4, 4), np.random.default_rng(0))
    with pytest.raises(InterpretError):
        integrated_gradients(params, np.zeros(3), target=0)
    with pytest.raises(InterpretError):
        integrated_gradients(params, np.zeros(4), target=5)


def test_compute_attributions_matches_per_sample():
    rng = np.random.default_rng(2)
    params = init_classifier_params(5, 3, (6, 6), rng)
    x = rng.standard_normal((4, 5))
    attr = compute_attributions(x, params, steps=16)
    assert attr.values.shape == (3, 5)
    assert attr.n_samples == 4
    for c in range(3):
        rows = [integrated_gradients(params, x[i], c, steps=16) for i in range(4)]
        np.testing.assert_allclose(attr.values[c], np.mean(rows, axis=0), atol=1e-11)


def test_compute_attributions_validation():
    params = init_classifier_params(5, 2, (4, 4), np.random.default_rng(0))
    with pytest.raises(InterpretError):
        compute_attributions(np.zeros((0, 5)), params)
    with pytest.raises(InterpretError):
        compute_attributions(np.zeros((3, 4)), params)


def test_attribution_matrix_roundtrip_and_checks():
    m = AttributionMatrix(values=np.array([[1.0, -2.0], [0.5, 0.25]]), n_samples=7)
    again = AttributionMatrix.from_dict(json.loads(json.dumps(m.to_dict())))
    np.testing.assert_array_equal(again.values, m.values)
    assert again.n_samples == 7
    with pytest.raises(InterpretError):
        AttributionMatrix(values=np.array([[np.nan, 0.0]]), n_samples=1)
    with pytest.raises(InterpretError):
        AttributionMatrix(values=np.zeros((2, 2)), n_samples=0)


# ---------------------------------------------------------------------------
# spatial activations


def test_spatial_activation_identity_covariance():
    w = np.random.default_rng(3).standard_normal((5, 3))
    np.testing.assert_array_equal(spatial_activation(w, np.eye(5)), w)


def test_spatial_activation_rank_one_covariance():
    rng = np.random.default_rng(4)
    u = rng.standard_normal(6)
    w = rng.standard_normal((6, 2))
    a = spatial_activation(w, np.outer(u, u))
    for t in range(2):
        cos = abs(a[:, t] @ u) / (np.linalg.norm(a[:, t]) * np.linalg.norm(u))
        assert cos > 1 - 1e-12


def test_spatial_activation_linear_in_kernel():
    rng = np.random.default_rng(5)
    s = rng.standard_normal((4, 4))
    s = s @ s.T
    w1, w2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    lhs = spatial_activation(2.0 * w1 - 0.5 * w2, s)
    rhs = 2.0 * spatial_activation(w1, s) - 0.5 * spatial_activation(w2, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_spatial_activation_validation():
    with pytest.raises(InterpretError):
        spatial_activation(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(InterpretError):
        spatial_activation(np.zeros((5, 2)), np.eye(4))


def test_forward_model_recovery_from_planted_pattern():
    # observations x_t = pattern * s_t + noise; a least-squares decoder w is
    # a backward model, but sigma_hat @ w recovers the forward pattern
    rng = np.random.default_rng(6)
    m, n = 8, 20000
    pattern = rng.standard_normal(m)
    pattern /= np.linalg.norm(pattern)
    s = rng.standard_normal(n)
    snr = 10.0
    x = np.outer(pattern, s) * np.sqrt(snr) + rng.standard_normal((m, n))
    w = np.linalg.solve(x @ x.T, x @ s)  # decoder weights
    sigma = np.cov(x)
    a = spatial_activation(w[:, None], sigma)[:, 0]
    cos = abs(a @ pattern) / np.linalg.norm(a)
    assert cos >= 0.95


# ---------------------------------------------------------------------------
# stream covariances


def test_stream_covariances_match_direct_computation():
    geom = toy_geometry()
    rng = np.random.default_rng(7)
    enc = init_encoder_params(geom, rng)
    arrays = [rng.standard_normal((6, 200)) for _ in range(3)]
    covs = estimate_stream_covariances(arrays, enc, geom, max_points=10_000, seed=0)
    assert covs.shape == (2, 6, 6)
    # no subsampling at this size: direct covariance over all columns
    for g in range(2):
        h = [
            nd.conv_time_broadcast(DiffTensor.constant(x), enc.temporal.detached()).values[g]
            for x in arrays
        ]
        direct = np.cov(np.concatenate(h, axis=1))
        np.testing.assert_allclose(covs[g], direct, atol=1e-10)


def test_stream_covariances_subsampled_still_close():
    geom = toy_geometry()
    rng = np.random.default_rng(8)
    enc = init_encoder_params(geom, rng)
    arrays = [rng.standard_normal((6, 400)) for _ in range(4)]
    full = estimate_stream_covariances(arrays, enc, geom, max_points=1_000_000)
    sub = estimate_stream_covariances(arrays, enc, geom, max_points=800)
    for g in range(2):
        np.testing.assert_allclose(sub[g], sub[g].T, atol=1e-12)
        assert np.linalg.norm(sub[g] - full[g]) / np.linalg.norm(full[g]) < 0.5


def test_stream_covariances_validation():
    geom = toy_geometry()
    enc = init_encoder_params(geom, np.random.default_rng(0))
    with pytest.raises(InterpretError):
        estimate_stream_covariances([], enc, geom)
    with pytest.raises(InterpretError):
        estimate_stream_covariances([np.zeros((5, 100))], enc, geom)


# ---------------------------------------------------------------------------
# spectra


def test_frequency_response_cosine_peak():
    fs, l1 = 125, 30
    n = np.arange(l1)
    taps = np.cos(2 * np.pi * 10.0 * n / fs) * np.hanning(l1)
    freqs, mag = filter_frequency_response(taps, fs, nfft=512)
    assert freqs[0] == 0.0 and freqs[-1] == pytest.approx(fs / 2)
    peak = freqs[np.argmax(mag)]
    assert abs(peak - 10.0) <= fs / 512 + 1e-9  # within one bin


def test_frequency_response_dc_and_delta():
    freqs, mag = filter_frequency_response(np.ones(8), 100, nfft=256)
    assert np.argmax(mag) == 0
    _, flat = filter_frequency_response(np.array([1.0, 0, 0, 0]), 100, nfft=256)
    np.testing.assert_allclose(flat, np.ones_like(flat), atol=1e-12)


def test_frequency_response_nfft_guard():
    with pytest.raises(InterpretError):
        filter_frequency_response(np.ones(30), 125, nfft=16)


# ---------------------------------------------------------------------------
# correlations


def test_correlation_identical_rows():
    attr = AttributionMatrix(np.tile(np.arange(5.0), (2, 1)), n_samples=1)
    out = contribution_correlation(attr)
    np.testing.assert_allclose(out, np.ones((2, 2)), atol=1e-12)


def test_correlation_negated_row():
    row = np.arange(5.0)
    attr = AttributionMatrix(np.stack([row, -row]), n_samples=1)
    out = contribution_correlation(attr)
    assert out[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert out[0, 0] == 1.0 and out[1, 1] == 1.0


def test_correlation_matches_corrcoef():
    rng = np.random.default_rng(9)
    attr = AttributionMatrix(rng.standard_normal((4, 256)), n_samples=10)
    out = contribution_correlation(attr)
    np.testing.assert_allclose(out, np.corrcoef(attr.values), atol=1e-12)
    np.testing.assert_allclose(out, out.T, atol=0)
    np.testing.assert_array_equal(np.diag(out), np.ones(4))


def test_correlation_zero_variance_flagged():
    attr = AttributionMatrix(
        np.stack([np.zeros(6), np.arange(6.0), np.arange(6.0) * 2]), n_samples=1
    )
    out = contribution_correlation(attr)
    assert np.all(np.isnan(out[0])) and np.all(np.isnan(out[:, 0]))
    assert out[1, 2] == pytest.approx(1.0, abs=1e-12)


def test_correlation_needs_two_classes():
    with pytest.raises(InterpretError):
        contribution_correlation(AttributionMatrix(np.ones((1, 4)), n_samples=1))


# ---------------------------------------------------------------------------
# dimension reports


def report_fixture(dominant=3, value=-3.0):
    geom = toy_geometry()
    rng = np.random.default_rng(10)
    enc = init_encoder_params(geom, rng)
    values = np.zeros((2, geom.n_latent))
    values[1, dominant] = value
    values[0, 0] = 0.1
    attr = AttributionMatrix(values, n_samples=3)
    covs = np.stack([np.eye(6) for _ in range(2)])
    return geom, enc, attr, covs


def test_top_dimension_report_selects_and_assembles():
    geom, enc, attr, covs = report_fixture(dominant=3, value=-3.0)
    trace = np.random.default_rng(11).uniform(0, 1, size=(geom.n_latent, 64))
    report = top_dimension_report(attr, 1, enc, geom, covs, attention_trace=trace)
    assert report.dimension == 3
    assert report.sign == "-"
    assert report.mean_attribution == -3.0
    group = kernel_groups(geom)[3]
    np.testing.assert_array_equal(report.temporal_filter, enc.temporal.values[group, 0])
    np.testing.assert_array_equal(report.spatial_filter, enc.spatial.values[3])
    # identity covariance: the pattern equals the filter
    np.testing.assert_array_equal(report.spatial_pattern, report.spatial_filter)
    assert report.dilation == per_kernel_dilations(geom)[3]
    np.testing.assert_array_equal(report.attention_trace, trace[3])
    assert report.freq_hz[-1] == pytest.approx(geom.fs / 2)


def test_top_dimension_report_json_roundtrip():
    geom, enc, attr, covs = report_fixture()
    report = top_dimension_report(attr, 1, enc, geom, covs)
    blob = json.dumps(report.to_dict())
    again = DimensionReport.from_dict(json.loads(blob))
    np.testing.assert_array_equal(again.temporal_filter, report.temporal_filter)
    np.testing.assert_array_equal(again.freq_magnitude, report.freq_magnitude)
    np.testing.assert_array_equal(again.spatial_pattern, report.spatial_pattern)
    assert again.attention_trace is None
    assert again.sign == report.sign and again.dimension == report.dimension


def test_top_dimension_report_validation():
    geom, enc, attr, covs = report_fixture()
    with pytest.raises(InterpretError):
        top_dimension_report(attr, 7, enc, geom, covs)
    with pytest.raises(InterpretError):
        top_dimension_report(attr, 1, enc, geom, covs[:1])
    with pytest.raises(InterpretError):
        top_dimension_report(attr, 1, enc, geom, covs,
                             attention_trace=np.zeros((2, 64)))


def test_window_attention_shapes():
    geom = toy_geometry()
    rng = np.random.default_rng(12)
    enc = init_encoder_params(geom, rng)
    x = rng.standard_normal((6, 64))
    trace = window_attention(x, enc, geom)
    assert trace.shape == (geom.n_latent, 64)
    assert np.all((trace > 0) & (trace < 1))  # sigmoid activation
    geom_none = EncoderGeometry(**{**geom.to_dict(), "activation": "none",
                                    "dilation_schedule": geom.dilation_schedule})
    enc2 = init_encoder_params(geom_none, rng)
    assert window_attention(x, enc2, geom_none) is None
