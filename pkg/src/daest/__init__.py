"""DAEST: dynamic-attention EEG state-transition modeling.

A numpy-based research library covering the full pipeline: a linear
spatiotemporal encoder built from temporal and dilated spatial-transition
convolutions, a dynamic channel-attention module, contrastive pretraining
across subjects, an emotion classifier over smoothed per-second features,
and interpretability reports (integrated gradients, spatial activation
patterns, filter spectra).  All gradients come from the small reverse-mode
core in :mod:`daest.ndcore`.
"""

from daest.encoder import (
    AttentionSeries,
    EncoderGeometry,
    EncoderParams,
    LatentSeries,
    dya_apply,
    dya_weights,
    encoder_forward,
    init_encoder_params,
    tstc_forward,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionSeries",
    "EncoderGeometry",
    "EncoderParams",
    "LatentSeries",
    "dya_apply",
    "dya_weights",
    "encoder_forward",
    "init_encoder_params",
    "tstc_forward",
    "__version__",
]
