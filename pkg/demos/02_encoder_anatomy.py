"""Walk through the encoder: filterbank, transition conv, attention gate.

The encoder maps an (M, T) multichannel window to K gated latent series.
Three stages:

  1. a temporal filterbank (K1 one-channel kernels convolved with every
     input channel, giving K1*M filtered streams),
  2. a grouped, dilated spatial-transition convolution (K2 kernels per
     temporal stream; each kernel spans L2 time steps of all M channels
     at its dilation, so it reads spatial patterns several transition
     steps apart),
  3. a dynamic attention gate: depthwise conv + moving average + channel
     mix + sigmoid, multiplied back onto the latent series.
"""

import numpy as np

from daest.encoder import (
    EncoderGeometry,
    dya_weights,
    encoder_forward,
    init_encoder_params,
    kernel_groups,
    per_kernel_dilations,
    tstc_forward,
)

geometry = EncoderGeometry(
    n_channels=6,
    n_samples=128,
    fs=32,
    n_temporal=4,            # K1 temporal filters
    temporal_len=15,         # L1 taps each
    n_spatial_per_temporal=4,  # K2 spatial kernels per stream
    transition_steps=3,      # L2: how many transition steps a kernel spans
    dilation_schedule=((1, 4), (2, 4), (4, 4), (8, 4)),
    attention_len=7,
    activation="sigmoid",
)
print(f"latent dimensions K = K1*K2 = {geometry.n_latent}")
print(f"dilation of each kernel: {per_kernel_dilations(geometry)}")
print(f"temporal stream feeding each kernel: {kernel_groups(geometry)}")

rng = np.random.default_rng(3)
params = init_encoder_params(geometry, rng)
print(f"\nparameter tensors:")
print(f"  temporal  {params.temporal.shape}   (K1, 1, L1)")
print(f"  spatial   {params.spatial.shape}  (K, M, L2)")
print(f"  attn_conv {params.attn_conv.shape}     (K, L3)")
print(f"  attn_mix  {params.attn_mix.shape}     (K, K)")
print(f"  total scalars: {params.n_params}")

# a window with an 8 Hz planted rhythm on channels 0..2
t = np.arange(geometry.n_samples) / geometry.fs
x = 0.3 * rng.normal(size=(6, geometry.n_samples))
x[:3] += np.sin(2 * np.pi * 8.0 * t)

latent = tstc_forward(x, params, geometry)
print(f"\nlatent series before gating: {latent.array.shape}  (K, T)")

attention = dya_weights(latent, params, geometry)
print(f"attention weights: {attention.array.shape}, "
      f"range [{attention.array.min():.3f}, {attention.array.max():.3f}]")

gated, _ = encoder_forward(x, params, geometry)
ratio = np.abs(gated.array).mean() / np.abs(latent.array).mean()
print(f"gating keeps {ratio:.1%} of mean latent magnitude")

# "none" bypasses the gate entirely
plain = EncoderGeometry.from_dict({**geometry.to_dict(), "activation": "none"})
ungated, att = encoder_forward(x, params, plain)
print(f'activation="none": weights is {att.weights}, '
      f"output equals raw latent: {np.array_equal(ungated.array, latent.array)}")
