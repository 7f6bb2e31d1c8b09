"""Interpretability of trained models.

Four lenses on what a model learned:

* integrated gradients on the classifier's feature space, attributing each
  latent dimension's contribution to each emotion class;
* forward-model spatial activations: each spatial-transition kernel's
  backward weights mapped through the input covariance of its temporal
  stream, giving electrode-space patterns that are physiologically
  readable;
* frequency responses of the temporal filterbank kernels;
* attention-weight traces of selected windows.

All functions are pure and operate on frozen parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from daest import ndcore as nd
from daest.classify import ClassifierParams, mlp_logits
from daest.encoder import (
    EncoderGeometry,
    EncoderParams,
    encoder_forward,
    kernel_groups,
    per_kernel_dilations,
)
from daest.ndcore import DiffTensor, Tape
from daest.util import rng_for

__all__ = [
    "InterpretError",
    "AttributionMatrix",
    "DimensionReport",
    "path_attributions",
    "integrated_gradients",
    "compute_attributions",
    "spatial_activation",
    "estimate_stream_covariances",
    "filter_frequency_response",
    "contribution_correlation",
    "top_dimension_report",
    "window_attention",
]


class InterpretError(Exception):
    """Invalid shapes or empty evaluation sets."""


# ---------------------------------------------------------------------------
# integrated gradients


def path_attributions(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    baseline: np.ndarray | None = None,
    steps: int = 64,
) -> np.ndarray:
    """Straight-path integrated gradients with midpoint quadrature.

    ``grad_fn`` maps a batch of points (n, K) to the gradients of a scalar
    function at those points, also (n, K).  The attribution of coordinate i
    is (x_i - b_i) times the path-averaged partial derivative.
    """
    if steps < 1:
        raise InterpretError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if b.shape != x.shape:
        raise InterpretError(f"baseline shape {b.shape} differs from input {x.shape}")
    alphas = (np.arange(steps) + 0.5) / steps
    points = b[None, :] + alphas[:, None] * (x - b)[None, :]
    grads = grad_fn(points)
    if grads.shape != points.shape:
        raise InterpretError(f"grad_fn returned {grads.shape}, expected {points.shape}")
    return (x - b) * grads.mean(axis=0)


def _logit_gradients(points: np.ndarray, classifier: ClassifierParams, target: int) -> np.ndarray:
    """Gradients of the target-class logit at each row of ``points``.

    Rows pass through the network independently, so the gradient of the
    summed target logit splits into per-row input gradients.
    """
    tape = Tape()
    leaf = DiffTensor(np.asarray(points, dtype=np.float64), tape=tape)
    logits = mlp_logits(leaf, classifier.detached())
    n = points.shape[0]
    picked = nd.take_pairs(logits, np.arange(n), np.full(n, target, dtype=np.intp))
    tape.backward(nd.sum_all(picked))
    return leaf.grad.copy()


def integrated_gradients(
    classifier: ClassifierParams,
    x: np.ndarray,
    target: int,
    baseline: np.ndarray | None = None,
    steps: int = 64,
) -> np.ndarray:
    """Per-feature attribution of the target class logit for one sample.

    The default baseline is the all-zero feature vector, the fixed point of
    the causal normalization that produced the features.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != classifier.n_features:
        raise InterpretError(
            f"expected a ({classifier.n_features},) feature vector, got {x.shape}"
        )
    if not 0 <= target < classifier.n_classes:
        raise InterpretError(f"target {target} outside [0, {classifier.n_classes})")
    return path_attributions(
        lambda pts: _logit_gradients(pts, classifier, target), x, baseline, steps
    )


@dataclass
class AttributionMatrix:
    """Mean per-feature attribution for each class over an evaluation set.

    ``values[c, k]`` is the mean integrated-gradient attribution of feature
    k toward the class-c logit; rows follow label order.
    """

    values: np.ndarray  # (C, K)
    n_samples: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InterpretError(f"attribution matrix must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InterpretError("attribution matrix holds non-finite entries")
        if self.n_samples < 1:
            raise InterpretError("attribution matrix needs at least one sample")

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionMatrix":
        return cls(values=np.array(d["values"], dtype=np.float64), n_samples=int(d["n_samples"]))


def compute_attributions(
    features: np.ndarray,
    classifier: ClassifierParams,
    steps: int = 64,
    baseline: np.ndarray | None = None,
) -> AttributionMatrix:
    """Integrated gradients of every class logit, averaged over samples.

    One gradient batch per (class, path step); each batch runs every sample
    simultaneously.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != classifier.n_features:
        raise InterpretError(
            f"expected (N, {classifier.n_features}) features, got {x.shape}"
        )
    n, k = x.shape
    if n < 1:
        raise InterpretError("evaluation set is empty")
    if steps < 1:
        raise InterpretError(f"steps must be >= 1, got {steps}")
    b = np.zeros(k) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if b.shape != (k,):
        raise InterpretError(f"baseline shape {b.shape}, expected ({k},)")
    alphas = (np.arange(steps) + 0.5) / steps
    delta = x - b[None, :]
    values = np.empty((classifier.n_classes, k))
    for c in range(classifier.n_classes):
        avg = np.zeros((n, k))
        for a in alphas:
            avg += _logit_gradients(b[None, :] + a * delta, classifier, c)
        attributions = delta * (avg / steps)
        values[c] = attributions.mean(axis=0)
    return AttributionMatrix(values=values, n_samples=n)


# ---------------------------------------------------------------------------
# forward-model spatial activations


def spatial_activation(w_spatial: np.ndarray, sigma_bar: np.ndarray) -> np.ndarray:
    """Forward-model pattern of a backward spatial filter: sigma_bar @ W.

    Column t of the (M, L2) kernel is mapped independently, so the result
    keeps the kernel's shape and is linear in it.
    """
    w = np.asarray(w_spatial, dtype=np.float64)
    s = np.asarray(sigma_bar, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InterpretError(f"covariance must be square, got {s.shape}")
    if w.ndim != 2 or w.shape[0] != s.shape[0]:
        raise InterpretError(
            f"kernel shape {w.shape} does not match {s.shape[0]} covariance channels"
        )
    return s @ w


def estimate_stream_covariances(
    arrays: Sequence[np.ndarray],
    enc: EncoderParams,
    geometry: EncoderGeometry,
    max_points: int = 100_000,
    seed: int = 0,
) -> np.ndarray:
    """Per-temporal-stream channel covariance over an evaluation set.

    Each (M, T) array is pushed through the temporal filterbank; for every
    temporal stream the M-channel covariance is estimated from up to
    ``max_points`` randomly sampled time points, accumulated in float64.

    Returns an array of shape (K1, M, M).
    """
    if not arrays:
        raise InterpretError("covariance estimation needs at least one array")
    temporal = enc.temporal.detached()
    per_array = max(1, int(np.ceil(max_points / len(arrays))))
    rng = rng_for(seed, "stream-cov")
    k1 = geometry.n_temporal
    m = geometry.n_channels
    columns: list[list[np.ndarray]] = [[] for _ in range(k1)]
    for x in arrays:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != m:
            raise InterpretError(f"expected ({m}, T) arrays, got {x.shape}")
        h = nd.conv_time_broadcast(DiffTensor.constant(x), temporal).values  # (K1, M, T)
        t = h.shape[-1]
        idx = rng.permutation(t)[:per_array] if t > per_array else np.arange(t)
        for g in range(k1):
            columns[g].append(h[g][:, idx])
    covs = np.empty((k1, m, m))
    for g in range(k1):
        pts = np.concatenate(columns[g], axis=1)
        if pts.shape[1] > max_points:
            keep = rng.permutation(pts.shape[1])[:max_points]
            pts = pts[:, keep]
        centered = pts - pts.mean(axis=1, keepdims=True)
        denom = max(pts.shape[1] - 1, 1)
        covs[g] = centered @ centered.T / denom
    return covs


# ---------------------------------------------------------------------------
# spectra


def filter_frequency_response(
    taps: np.ndarray, fs: float, nfft: int = 512
) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude response of a temporal kernel on the 0..fs/2 grid.

    Returns (frequencies in Hz, |DFT| magnitudes), zero-padded to nfft.
    """
    taps = np.asarray(taps, dtype=np.float64).reshape(-1)
    if nfft < taps.size:
        raise InterpretError(f"nfft {nfft} shorter than the kernel ({taps.size} taps)")
    mag = np.abs(np.fft.rfft(taps, n=nfft))
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    return freqs, mag


# ---------------------------------------------------------------------------
# cross-class structure


def contribution_correlation(attr: AttributionMatrix) -> np.ndarray:
    """Pearson correlation between the attribution rows of all classes.

    Entries involving a zero-variance row are NaN (undefined correlation);
    everything else is clipped into [-1, 1] with an exact unit diagonal.
    """
    if attr.n_classes < 2:
        raise InterpretError("correlation needs at least 2 classes")
    v = attr.values
    centered = v - v.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    c = attr.n_classes
    out = np.full((c, c), np.nan)
    defined = norms > 0
    if np.any(defined):
        sub = centered[defined]
        corr = (sub @ sub.T) / np.outer(norms[defined], norms[defined])
        out[np.ix_(defined, defined)] = np.clip(corr, -1.0, 1.0)
        di = np.nonzero(defined)[0]
        out[di, di] = 1.0
    return out


# ---------------------------------------------------------------------------
# per-dimension reports


@dataclass
class DimensionReport:
    """Everything interpretable about one latent dimension.

    The frequency axis spans 0..fs/2; spatial fields are (M, L2); the
    attention trace is one row of a sample window's attention weights, or
    None when the model bypasses attention.
    """

    dimension: int
    emotion: int
    sign: str  # "+" or "-"
    mean_attribution: float
    dilation: int
    temporal_filter: np.ndarray  # (L1,)
    freq_hz: np.ndarray
    freq_magnitude: np.ndarray
    spatial_filter: np.ndarray  # (M, L2)
    spatial_pattern: np.ndarray  # (M, L2)
    attention_trace: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "emotion": self.emotion,
            "sign": self.sign,
            "mean_attribution": self.mean_attribution,
            "dilation": self.dilation,
            "temporal_filter": self.temporal_filter.tolist(),
            "freq_hz": self.freq_hz.tolist(),
            "freq_magnitude": self.freq_magnitude.tolist(),
            "spatial_filter": self.spatial_filter.tolist(),
            "spatial_pattern": self.spatial_pattern.tolist(),
            "attention_trace": None
            if self.attention_trace is None
            else self.attention_trace.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DimensionReport":
        return cls(
            dimension=int(d["dimension"]),
            emotion=int(d["emotion"]),
            sign=d["sign"],
            mean_attribution=float(d["mean_attribution"]),
            dilation=int(d["dilation"]),
            temporal_filter=np.array(d["temporal_filter"], dtype=np.float64),
            freq_hz=np.array(d["freq_hz"], dtype=np.float64),
            freq_magnitude=np.array(d["freq_magnitude"], dtype=np.float64),
            spatial_filter=np.array(d["spatial_filter"], dtype=np.float64),
            spatial_pattern=np.array(d["spatial_pattern"], dtype=np.float64),
            attention_trace=None
            if d.get("attention_trace") is None
            else np.array(d["attention_trace"], dtype=np.float64),
        )


def window_attention(
    x: np.ndarray, enc: EncoderParams, geometry: EncoderGeometry
) -> np.ndarray | None:
    """Attention weights (K, T) of one window, or None when bypassed."""
    _, attention = encoder_forward(np.asarray(x, dtype=np.float64), enc.detached(), geometry)
    return attention.array


def top_dimension_report(
    attr: AttributionMatrix,
    emotion: int,
    enc: EncoderParams,
    geometry: EncoderGeometry,
    covariances: np.ndarray,
    attention_trace: np.ndarray | None = None,
    nfft: int = 512,
) -> DimensionReport:
    """Report on the latent dimension contributing most to one emotion.

    Picks the dimension with the largest |mean attribution| for the class,
    then assembles its temporal filter and spectrum, its spatial filter and
    forward-model pattern (through the matching stream covariance), its
    dilation, and optionally one attention trace row.
    """
    if not 0 <= emotion < attr.n_classes:
        raise InterpretError(f"emotion {emotion} outside [0, {attr.n_classes})")
    if attr.n_features != geometry.n_latent:
        raise InterpretError(
            f"attribution width {attr.n_features} does not match {geometry.n_latent} latents"
        )
    covariances = np.asarray(covariances, dtype=np.float64)
    if covariances.shape != (geometry.n_temporal, geometry.n_channels, geometry.n_channels):
        raise InterpretError(
            f"covariances shape {covariances.shape}, expected "
            f"({geometry.n_temporal}, {geometry.n_channels}, {geometry.n_channels})"
        )
    row = attr.values[emotion]
    dim = int(np.argmax(np.abs(row)))
    group = int(kernel_groups(geometry)[dim])
    dilation = int(per_kernel_dilations(geometry)[dim])
    taps = enc.temporal.values[group, 0, :].copy()
    freqs, mag = filter_frequency_response(taps, geometry.fs, nfft)
    w_spatial = enc.spatial.values[dim].copy()
    pattern = spatial_activation(w_spatial, covariances[group])
    trace = None
    if attention_trace is not None:
        attention_trace = np.asarray(attention_trace, dtype=np.float64)
        if attention_trace.ndim != 2 or attention_trace.shape[0] != geometry.n_latent:
            raise InterpretError(
                f"attention trace shape {attention_trace.shape}, expected "
                f"({geometry.n_latent}, T)"
            )
        trace = attention_trace[dim].copy()
    return DimensionReport(
        dimension=dim,
        emotion=emotion,
        sign="+" if row[dim] >= 0 else "-",
        mean_attribution=float(row[dim]),
        dilation=dilation,
        temporal_filter=taps,
        freq_hz=freqs,
        freq_magnitude=mag,
        spatial_filter=w_spatial,
        spatial_pattern=pattern,
        attention_trace=trace,
    )
