"""Spatiotemporal encoder: temporal filterbank, spatial-transition
convolution, and dynamic channel attention.

The encoder is deliberately linear end to end (no nonlinearity or
normalization between the two convolution stages), so every latent
dimension is an exact linear functional of the input window.  That keeps
the per-dimension filters directly interpretable: each latent dimension j
owns one temporal kernel (via its group) and one spatial-transition kernel
whose columns are topographies applied at dilated time offsets.

Attention is multiplicative: a depthwise temporal convolution of the
latent series, smoothed by a moving average and mixed across channels,
passes through a pointwise activation and gates the latent series
elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from daest.ndcore import (
    ConvSpec,
    DiffTensor,
    DimensionError,
    Tape,
    conv_time,
    conv_time_broadcast,
    moving_average,
    mul,
    pointwise_mix,
    relu,
    reshape,
    sigmoid,
    softmax_channels,
    spatial_transition_conv,
)

__all__ = [
    "ACTIVATIONS",
    "EncoderGeometry",
    "EncoderParams",
    "LatentSeries",
    "AttentionSeries",
    "per_kernel_dilations",
    "init_encoder_params",
    "tstc_forward",
    "dya_weights",
    "dya_apply",
    "encoder_forward",
]

ACTIVATIONS = ("sigmoid", "softmax", "relu", "none", "global")


@dataclass(frozen=True)
class EncoderGeometry:
    """Static shape information for one encoder instance.

    Attributes:
        n_channels: electrodes M in the input window.
        n_samples: time steps T per training window.
        fs: sampling rate in Hz.
        n_temporal: temporal filterbank size K1.
        temporal_len: temporal kernel extent L1 in samples.
        n_spatial_per_temporal: spatial-transition kernels per temporal
            filter, K2; the latent dimensionality is K = K1 * K2.
        transition_steps: spatial kernel extent L2 (number of dilated time
            offsets each kernel spans).
        dilation_schedule: (dilation, kernel_count) pairs; counts must sum
            to K.  Kernels are assigned so each temporal group receives a
            near-even share of every dilation.
        attention_len: extent L3 of the attention convolution and of its
            smoothing window.
        activation: attention nonlinearity; one of
            sigmoid / softmax / relu / none / global.
    """

    n_channels: int
    n_samples: int
    fs: int
    n_temporal: int = 16
    temporal_len: int = 30
    n_spatial_per_temporal: int = 16
    transition_steps: int = 3
    dilation_schedule: tuple[tuple[int, int], ...] = ((1, 64), (3, 64), (6, 64), (12, 64))
    attention_len: int = 7
    activation: str = "sigmoid"

    def __post_init__(self) -> None:
        for name in ("n_channels", "n_samples", "fs", "n_temporal", "temporal_len",
                     "n_spatial_per_temporal", "transition_steps", "attention_len"):
            if getattr(self, name) < 1:
                raise DimensionError(f"geometry field {name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DimensionError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )
        sched = tuple((int(d), int(c)) for d, c in self.dilation_schedule)
        object.__setattr__(self, "dilation_schedule", sched)
        if any(d < 1 or c < 1 for d, c in sched):
            raise DimensionError("dilation schedule entries must be positive")
        total = sum(c for _, c in sched)
        if total != self.n_latent:
            raise DimensionError(
                f"dilation schedule covers {total} kernels, expected K = {self.n_latent}"
            )

    @property
    def n_latent(self) -> int:
        return self.n_temporal * self.n_spatial_per_temporal

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "fs": self.fs,
            "n_temporal": self.n_temporal,
            "temporal_len": self.temporal_len,
            "n_spatial_per_temporal": self.n_spatial_per_temporal,
            "transition_steps": self.transition_steps,
            "dilation_schedule": [list(pair) for pair in self.dilation_schedule],
            "attention_len": self.attention_len,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderGeometry":
        d = dict(d)
        if "dilation_schedule" in d:
            d["dilation_schedule"] = tuple(tuple(pair) for pair in d["dilation_schedule"])
        return cls(**d)

    def with_updates(self, **kwargs) -> "EncoderGeometry":
        return replace(self, **kwargs)


def per_kernel_dilations(geometry: EncoderGeometry) -> np.ndarray:
    """Dilation for each of the K spatial-transition kernels.

    The schedule's counts are expanded to a flat list and dealt across the
    temporal groups round-robin, so every group sees close to the same mix
    of dilations regardless of how counts divide.
    """
    k1 = geometry.n_temporal
    k2 = geometry.n_spatial_per_temporal
    flat = np.repeat(
        [d for d, _ in geometry.dilation_schedule],
        [c for _, c in geometry.dilation_schedule],
    )
    # Kernel j = g * K2 + p receives flat[p * K1 + g]: walking p for fixed
    # group g strides through the schedule, interleaving groups.
    return flat.reshape(k2, k1).T.reshape(k1 * k2).astype(np.intp)


def kernel_groups(geometry: EncoderGeometry) -> np.ndarray:
    """Temporal-channel index read by each spatial-transition kernel."""
    k2 = geometry.n_spatial_per_temporal
    return (np.arange(geometry.n_latent) // k2).astype(np.intp)


@dataclass
class EncoderParams:
    """Learnable encoder tensors.

    Attributes:
        temporal: filterbank kernels, shape (K1, 1, L1).
        spatial: spatial-transition kernels, shape (K, M, L2).
        attn_conv: depthwise attention kernels, shape (K, L3).
        attn_mix: dense channel-mixing matrix, shape (K, K).
    """

    temporal: DiffTensor
    spatial: DiffTensor
    attn_conv: DiffTensor
    attn_mix: DiffTensor

    def tensors(self) -> list[DiffTensor]:
        return [self.temporal, self.spatial, self.attn_conv, self.attn_mix]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {
            "temporal": self.temporal.values,
            "spatial": self.spatial.values,
            "attn_conv": self.attn_conv.values,
            "attn_mix": self.attn_mix.values,
        }

    def detached(self) -> "EncoderParams":
        """Constant view for inference; shares the value arrays."""
        return EncoderParams(*(t.detached() for t in self.tensors()))

    def copy_values(self) -> list[np.ndarray]:
        return [t.values.copy() for t in self.tensors()]

    def load_values(self, arrays: Sequence[np.ndarray]) -> None:
        for t, arr in zip(self.tensors(), arrays):
            if t.values.shape != arr.shape:
                raise DimensionError(f"shape mismatch loading {arr.shape} into {t.values.shape}")
            t.values[...] = arr

    @property
    def n_params(self) -> int:
        return sum(t.values.size for t in self.tensors())


@dataclass
class LatentSeries:
    """A latent time series (K, T) plus the geometry that produced it."""

    values: DiffTensor
    geometry: EncoderGeometry

    @property
    def array(self) -> np.ndarray:
        return self.values.values


@dataclass
class AttentionSeries:
    """Attention weights per latent dimension and time step.

    ``weights`` is None when the attention stage is bypassed
    (activation="none").  For activation="global" the weights are constant
    along time by construction.
    """

    weights: Optional[DiffTensor]
    activation: str

    @property
    def array(self) -> Optional[np.ndarray]:
        return None if self.weights is None else self.weights.values


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(
    geometry: EncoderGeometry,
    rng: np.random.Generator,
    tape: Tape | None = None,
) -> EncoderParams:
    """Uniform initialization with bound sqrt(1/fan_in) per tensor."""
    k1, l1 = geometry.n_temporal, geometry.temporal_len
    k, m, l2 = geometry.n_latent, geometry.n_channels, geometry.transition_steps
    l3 = geometry.attention_len
    temporal = _uniform(rng, (k1, 1, l1), l1)
    spatial = _uniform(rng, (k, m, l2), m * l2)
    attn_conv = _uniform(rng, (k, l3), l3)
    attn_mix = _uniform(rng, (k, k), k)
    return EncoderParams(
        temporal=DiffTensor(temporal, tape=tape),
        spatial=DiffTensor(spatial, tape=tape),
        attn_conv=DiffTensor(attn_conv, tape=tape),
        attn_mix=DiffTensor(attn_mix, tape=tape),
    )


def _check_window(x: DiffTensor | np.ndarray, geometry: EncoderGeometry) -> DiffTensor:
    t = x if isinstance(x, DiffTensor) else DiffTensor.constant(x)
    if t.ndim != 2 or t.shape[0] != geometry.n_channels:
        raise DimensionError(
            f"window shape {t.shape} does not match geometry (M={geometry.n_channels}, T)"
        )
    return t


def tstc_forward(
    x: DiffTensor | np.ndarray,
    params: EncoderParams,
    geometry: EncoderGeometry,
) -> LatentSeries:
    """Two-stage linear encoding of one (M, T) window into (K, T).

    Stage one cross-correlates every temporal kernel with every channel;
    stage two lets each spatial-transition kernel read one temporal
    channel's (M, T) map and collapse it to a single latent row across
    dilated time offsets.  T is preserved by same-padding in both stages
    and may differ from the geometry's training window length.
    """
    x = _check_window(x, geometry)
    h1 = conv_time_broadcast(x, params.temporal)
    latent = spatial_transition_conv(
        h1,
        params.spatial,
        kernel_groups(geometry),
        per_kernel_dilations(geometry),
    )
    return LatentSeries(values=latent, geometry=geometry)


def dya_weights(
    latent: LatentSeries | DiffTensor,
    params: EncoderParams,
    geometry: EncoderGeometry,
) -> AttentionSeries:
    """Dynamic attention weights for a latent series.

    Pipeline: depthwise temporal convolution, moving-average smoothing
    over the same extent, dense channel mixing, then the configured
    pointwise activation.  "global" pools the whole series to one value
    per channel (constant weights along time); "none" bypasses attention
    entirely and yields no weights.
    """
    z = latent.values if isinstance(latent, LatentSeries) else latent
    act = geometry.activation
    if act == "none":
        return AttentionSeries(weights=None, activation=act)

    k, t = z.shape
    if k != geometry.n_latent:
        raise DimensionError(f"latent has {k} rows, geometry expects {geometry.n_latent}")
    l3 = geometry.attention_len
    if l3 > t:
        raise DimensionError(f"attention extent {l3} exceeds series length {t}")

    conv = conv_time(
        z,
        reshape(params.attn_conv, (k, 1, l3)),
        ConvSpec(kernel_extent_time=l3, dilation=1, groups=k, padding="same_zero"),
    )
    if act == "global":
        pooled = moving_average(conv, window=t, stride=t)  # (K, 1)
    else:
        pooled = moving_average(conv, window=l3, stride=1)  # (K, T)
    mixed = pointwise_mix(pooled, params.attn_mix)

    if act == "softmax":
        weights = softmax_channels(mixed)
    elif act == "relu":
        weights = relu(mixed)
    else:  # sigmoid and global
        weights = sigmoid(mixed)
    if act == "global":
        # Broadcast the single pooled column across time.
        weights = mul(weights, np.ones((1, t)))
    return AttentionSeries(weights=weights, activation=act)


def dya_apply(latent: LatentSeries, attention: AttentionSeries) -> LatentSeries:
    """Gate a latent series with attention weights elementwise."""
    if attention.weights is None:
        return latent
    gated = mul(latent.values, attention.weights)
    return LatentSeries(values=gated, geometry=latent.geometry)


def encoder_forward(
    x: DiffTensor | np.ndarray,
    params: EncoderParams,
    geometry: EncoderGeometry,
) -> tuple[LatentSeries, AttentionSeries]:
    """Full encoder pass: (M, T) window to gated (K, T) latent series."""
    latent = tstc_forward(x, params, geometry)
    attention = dya_weights(latent, params, geometry)
    return dya_apply(latent, attention), attention
