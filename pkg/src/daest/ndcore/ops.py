"""Differentiable operations over :class:`~daest.ndcore.tensor.DiffTensor`.

Every function here computes its value eagerly with numpy and, when any
input carries a tape, records a closure that maps the output adjoint back
onto the inputs.  Plain arrays and scalars are accepted anywhere a tensor
is; they are wrapped as constants and receive no gradient.

Convolutions follow the cross-correlation convention: no kernel flip, and
``same_zero`` padding places the extra zero at the head of the time axis
when the total padding is odd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from daest.ndcore.tensor import (
    DiffTensor,
    DimensionError,
    NumericError,
    Tape,
    debug_enabled,
)

__all__ = [
    "ConvSpec",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "softmax_channels",
    "sum_all",
    "mean_all",
    "sum_axis",
    "mean_axis",
    "matmul",
    "transpose",
    "reshape",
    "flatten",
    "stack_rows",
    "take_pairs",
    "l2_normalize_rows",
    "cosine_similarity_matrix",
    "linear",
    "conv_time",
    "conv_time_broadcast",
    "spatial_transition_conv",
    "moving_average",
    "pointwise_mix",
]


# ---------------------------------------------------------------------------
# plumbing

def _wrap(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor.constant(x)


def _tape_of(*tensors: DiffTensor) -> Tape | None:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str) -> None:
    if debug_enabled() and not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in input")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    out = DiffTensor._result(a.values + b.values, tape)
    if tape is not None:
        a_shape, b_shape = a.values.shape, b.values.shape

        def backward(go: np.ndarray) -> None:
            if a.tape is not None:
                a._accumulate(_unbroadcast(go, a_shape))
            if b.tape is not None:
                b._accumulate(_unbroadcast(go, b_shape))

        tape.record(out, backward)
    return out


def sub(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    out = DiffTensor._result(a.values - b.values, tape)
    if tape is not None:
        a_shape, b_shape = a.values.shape, b.values.shape

        def backward(go: np.ndarray) -> None:
            if a.tape is not None:
                a._accumulate(_unbroadcast(go, a_shape))
            if b.tape is not None:
                b._accumulate(_unbroadcast(-go, b_shape))

        tape.record(out, backward)
    return out


def mul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    out = DiffTensor._result(a.values * b.values, tape)
    if tape is not None:
        av, bv = a.values, b.values

        def backward(go: np.ndarray) -> None:
            if a.tape is not None:
                a._accumulate(_unbroadcast(go * bv, av.shape))
            if b.tape is not None:
                b._accumulate(_unbroadcast(go * av, bv.shape))

        tape.record(out, backward)
    return out


def neg(a) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    out = DiffTensor._result(-a.values, tape)
    if tape is not None:
        tape.record(out, lambda go: a._accumulate(-go))
    return out


def scale(a, c: float) -> DiffTensor:
    a = _wrap(a)
    c = float(c)
    tape = a.tape
    out = DiffTensor._result(a.values * c, tape)
    if tape is not None:
        tape.record(out, lambda go: a._accumulate(go * c))
    return out


def exp(a) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    ev = np.exp(a.values)
    out = DiffTensor._result(ev, tape)
    if tape is not None:
        tape.record(out, lambda go: a._accumulate(go * ev))
    return out


def log(a) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    out = DiffTensor._result(np.log(a.values), tape)
    if tape is not None:
        av = a.values
        tape.record(out, lambda go: a._accumulate(go / av))
    return out


# ---------------------------------------------------------------------------
# activations

def relu(a) -> DiffTensor:
    a = _wrap(a)
    _check_finite(a.values, "relu")
    tape = a.tape
    out = DiffTensor._result(np.maximum(a.values, 0.0), tape)
    if tape is not None:
        mask = a.values > 0.0  # subgradient 0 exactly at the kink

        def backward(go: np.ndarray) -> None:
            a._accumulate(go * mask)

        tape.record(out, backward)
    return out


def sigmoid(a) -> DiffTensor:
    a = _wrap(a)
    _check_finite(a.values, "sigmoid")
    tape = a.tape
    yv = expit(a.values)
    out = DiffTensor._result(yv.astype(a.dtype, copy=False), tape)
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            a._accumulate(go * yv * (1.0 - yv))

        tape.record(out, backward)
    return out


def softmax_channels(a) -> DiffTensor:
    """Softmax along axis 0, independently for each remaining index.

    For a (K, T) input this normalizes each time column over the K
    channels.  The row-wise maximum is subtracted before exponentiation,
    which leaves the value unchanged and keeps it finite.
    """
    a = _wrap(a)
    _check_finite(a.values, "softmax_channels")
    if a.ndim < 1:
        raise DimensionError("softmax_channels requires at least one axis")
    tape = a.tape
    shifted = a.values - a.values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    yv = e / e.sum(axis=0, keepdims=True)
    out = DiffTensor._result(yv, tape)
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            inner = (go * yv).sum(axis=0, keepdims=True)
            a._accumulate(yv * (go - inner))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping

def sum_all(a) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    out = DiffTensor._result(np.asarray(a.values.sum(), dtype=a.dtype), tape)
    if tape is not None:
        shape = a.values.shape
        tape.record(out, lambda go: a._accumulate(np.broadcast_to(go, shape)))
    return out


def mean_all(a) -> DiffTensor:
    a = _wrap(a)
    return scale(sum_all(a), 1.0 / a.values.size)


def sum_axis(a, axis: int, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    out = DiffTensor._result(a.values.sum(axis=axis, keepdims=keepdims), tape)
    if tape is not None:
        shape = a.values.shape

        def backward(go: np.ndarray) -> None:
            g = go if keepdims else np.expand_dims(go, axis)
            a._accumulate(np.broadcast_to(g, shape))

        tape.record(out, backward)
    return out


def mean_axis(a, axis: int, keepdims: bool = False) -> DiffTensor:
    a = _wrap(a)
    n = a.values.shape[axis]
    return scale(sum_axis(a, axis, keepdims=keepdims), 1.0 / n)


def transpose(a) -> DiffTensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    tape = a.tape
    out = DiffTensor._result(a.values.T, tape)
    if tape is not None:
        tape.record(out, lambda go: a._accumulate(go.T))
    return out


def reshape(a, shape: Sequence[int]) -> DiffTensor:
    a = _wrap(a)
    tape = a.tape
    orig = a.values.shape
    out = DiffTensor._result(a.values.reshape(shape), tape)
    if tape is not None:
        tape.record(out, lambda go: a._accumulate(go.reshape(orig)))
    return out


def flatten(a) -> DiffTensor:
    return reshape(a, (-1,))


def stack_rows(tensors: Sequence[DiffTensor]) -> DiffTensor:
    """Stack equal-shape 1-D tensors into a 2-D tensor, one per row."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise DimensionError("stack_rows needs at least one tensor")
    for t in ts:
        if t.ndim != 1 or t.shape != ts[0].shape:
            raise DimensionError("stack_rows requires equal-length 1-D tensors")
    tape = _tape_of(*ts)
    out = DiffTensor._result(np.stack([t.values for t in ts], axis=0), tape)
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            for i, t in enumerate(ts):
                if t.tape is not None:
                    t._accumulate(go[i])

        tape.record(out, backward)
    return out


def take_pairs(a, rows, cols) -> DiffTensor:
    """Gather ``a[rows[i], cols[i]]`` into a 1-D tensor."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2:
        raise DimensionError("take_pairs expects a 2-D tensor")
    if rows.shape != cols.shape or rows.ndim != 1:
        raise DimensionError("take_pairs expects matching 1-D index arrays")
    tape = a.tape
    out = DiffTensor._result(a.values[rows, cols], tape)
    if tape is not None:
        shape = a.values.shape

        def backward(go: np.ndarray) -> None:
            g = np.zeros(shape, dtype=go.dtype)
            np.add.at(g, (rows, cols), go)
            a._accumulate(g)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    out = DiffTensor._result(a.values @ b.values, tape)
    if tape is not None:
        av, bv = a.values, b.values

        def backward(go: np.ndarray) -> None:
            if a.tape is not None:
                a._accumulate(go @ bv.T)
            if b.tape is not None:
                b._accumulate(av.T @ go)

        tape.record(out, backward)
    return out


def linear(x, w, b=None) -> DiffTensor:
    """Dense layer ``x @ w + b`` for ``x`` of shape (N, D)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes disagree: {x.shape} @ {w.shape}")
    out = matmul(x, w)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
        out = add(out, b)
    return out


def l2_normalize_rows(a) -> DiffTensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    Norms are floored at a tiny constant so an all-zero row maps to zeros
    instead of NaN; for any practically sized row the operation is exactly
    scale-invariant.
    """
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a 2-D tensor")
    tape = a.tape
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, 1e-30)
    yv = a.values / norms
    out = DiffTensor._result(yv, tape)
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            inner = (go * yv).sum(axis=1, keepdims=True)
            a._accumulate((go - yv * inner) / norms)

        tape.record(out, backward)
    return out


def cosine_similarity_matrix(a) -> DiffTensor:
    """All-pairs cosine similarity of the rows of a 2-D tensor."""
    z = l2_normalize_rows(a)
    return matmul(z, transpose(z))


# ---------------------------------------------------------------------------
# convolutions

@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for :func:`conv_time`.

    ``padding`` is ``"same_zero"`` (zero padding, output length equals
    input length, extra zero at the head when the total is odd) or
    ``"none"`` (valid windows only).
    """

    kernel_extent_time: int
    dilation: int = 1
    groups: int = 1
    padding: str = "same_zero"

    def __post_init__(self) -> None:
        if self.kernel_extent_time < 1:
            raise DimensionError("kernel extent must be >= 1")
        if self.dilation < 1:
            raise DimensionError("dilation must be >= 1")
        if self.groups < 1:
            raise DimensionError("groups must be >= 1")
        if self.padding not in ("same_zero", "none"):
            raise DimensionError(f"unknown padding mode {self.padding!r}")


def _padded_windows(xv: np.ndarray, extent: int, dilation: int, padding: str):
    """Zero-pad the last axis and expose dilated kernel windows.

    Returns ``(windows, n_out, pad_head)`` where ``windows`` has shape
    ``(..., n_out, taps)`` with ``taps = extent``.
    """
    eff = (extent - 1) * dilation + 1
    t = xv.shape[-1]
    if padding == "same_zero":
        pad_total = eff - 1
        pad_head = (pad_total + 1) // 2
        pad_tail = pad_total // 2
        n_out = t
    else:
        if eff > t:
            raise DimensionError(
                f"kernel effective extent {eff} exceeds input length {t}"
            )
        pad_head = pad_tail = 0
        n_out = t - eff + 1
    if pad_head or pad_tail:
        width = [(0, 0)] * (xv.ndim - 1) + [(pad_head, pad_tail)]
        xp = np.pad(xv, width)
    else:
        xp = xv
    win = sliding_window_view(xp, eff, axis=-1)[..., ::dilation]
    return win[..., :n_out, :], n_out, pad_head


def conv_time(x, w, spec: ConvSpec) -> DiffTensor:
    """Grouped 1-D convolution along time (cross-correlation form).

    Args:
        x: tensor of shape (C_in, T).
        w: kernels of shape (C_out, C_in // groups, L).
        spec: extent, dilation, groups, and padding mode.

    Returns:
        Tensor of shape (C_out, T') where T' = T for ``same_zero`` padding
        and T - (L - 1) * dilation for ``padding="none"``.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(f"conv_time expects x (C,T) and w (O,I,L), got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, in_per_group, ext = w.shape
    g = spec.groups
    if ext != spec.kernel_extent_time:
        raise DimensionError(
            f"kernel extent {ext} != spec extent {spec.kernel_extent_time}"
        )
    if c_in % g or c_out % g:
        raise DimensionError(f"channels ({c_in} in, {c_out} out) not divisible by groups={g}")
    if in_per_group != c_in // g:
        raise DimensionError(
            f"kernel expects {in_per_group} channels per group, input provides {c_in // g}"
        )

    win, n_out, pad_head = _padded_windows(x.values, ext, spec.dilation, spec.padding)
    og = c_out // g
    wg = w.values.reshape(g, og, in_per_group, ext)
    win_g = win.reshape(g, in_per_group, n_out, ext)
    ov = np.einsum("goil,gitl->got", wg, win_g).reshape(c_out, n_out)

    tape = _tape_of(x, w)
    out = DiffTensor._result(ov, tape)
    if tape is not None:
        xv, wv = x.values, w.values
        dil = spec.dilation

        def backward(go: np.ndarray) -> None:
            go_g = go.reshape(g, og, n_out)
            if w.tape is not None:
                gw = np.einsum("got,gitl->goil", go_g, win_g)
                w._accumulate(gw.reshape(c_out, in_per_group, ext))
            if x.tape is not None:
                eff = (ext - 1) * dil + 1
                # Padded length must match the forward pass exactly.
                pad_total = eff - 1 if spec.padding == "same_zero" else 0
                gxp = np.zeros((c_in, t + pad_total), dtype=go.dtype)
                wv_g = wv.reshape(g, og, in_per_group, ext)
                for l in range(ext):
                    contrib = np.einsum("goi,got->git", wv_g[..., l], go_g)
                    gxp[:, l * dil : l * dil + n_out] += contrib.reshape(c_in, n_out)
                x._accumulate(gxp[:, pad_head : pad_head + t])

        tape.record(out, backward)
    return out


def conv_time_broadcast(x, w, dilation: int = 1) -> DiffTensor:
    """Apply a bank of single-channel temporal kernels to every channel.

    Args:
        x: tensor of shape (M, T).
        w: kernels of shape (K1, 1, L).

    Returns:
        Tensor of shape (K1, M, T): kernel k cross-correlated with channel
        m, same-padded.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != 1:
        raise DimensionError(
            f"conv_time_broadcast expects x (M,T) and w (K,1,L), got {x.shape}, {w.shape}"
        )
    m, t = x.shape
    k1, _, ext = w.shape
    win, n_out, pad_head = _padded_windows(x.values, ext, dilation, "same_zero")
    taps = w.values[:, 0, :]
    ov = np.einsum("mtl,kl->kmt", win, taps)

    tape = _tape_of(x, w)
    out = DiffTensor._result(ov, tape)
    if tape is not None:
        wv = w.values

        def backward(go: np.ndarray) -> None:
            if w.tape is not None:
                gw = np.einsum("kmt,mtl->kl", go, win)
                w._accumulate(gw[:, None, :])
            if x.tape is not None:
                eff = (ext - 1) * dilation + 1
                gxp = np.zeros((m, t + eff - 1), dtype=go.dtype)
                for l in range(ext):
                    gxp[:, l * dilation : l * dilation + n_out] += np.einsum(
                        "k,kmt->mt", wv[:, 0, l], go
                    )
                x._accumulate(gxp[:, pad_head : pad_head + t])

        tape.record(out, backward)
    return out


def spatial_transition_conv(h, w, group_of, dilation_of) -> DiffTensor:
    """Grouped spatial-transition convolution with per-kernel dilation.

    Each output kernel j reads one temporal channel ``group_of[j]`` of the
    (K1, M, T) input, correlates its (M, L) kernel across all M channels
    and L dilated time steps, and sums over channels, producing one latent
    row.  Same-padding keeps the time axis at T.

    Args:
        h: tensor of shape (K1, M, T).
        w: kernels of shape (K, M, L).
        group_of: int array (K,), input channel index per kernel.
        dilation_of: int array (K,), dilation per kernel.

    Returns:
        Tensor of shape (K, T).
    """
    h, w = _wrap(h), _wrap(w)
    group_of = np.asarray(group_of, dtype=np.intp)
    dilation_of = np.asarray(dilation_of, dtype=np.intp)
    if h.ndim != 3 or w.ndim != 3:
        raise DimensionError(
            f"spatial_transition_conv expects h (K1,M,T) and w (K,M,L), got {h.shape}, {w.shape}"
        )
    k1, m, t = h.shape
    k, m_w, ext = w.shape
    if m_w != m:
        raise DimensionError(f"kernel channel count {m_w} != input channels {m}")
    if group_of.shape != (k,) or dilation_of.shape != (k,):
        raise DimensionError("group_of / dilation_of must have one entry per kernel")
    if group_of.min(initial=0) < 0 or group_of.max(initial=0) >= k1:
        raise DimensionError(f"group indices must lie in [0, {k1})")
    if dilation_of.min(initial=1) < 1:
        raise DimensionError("dilations must be >= 1")

    ov = np.empty((k, t), dtype=h.dtype)
    plans = []  # (idx, groups_sub, win) per distinct dilation
    for d in np.unique(dilation_of):
        idx = np.nonzero(dilation_of == d)[0]
        win, n_out, pad_head = _padded_windows(h.values, ext, int(d), "same_zero")
        groups_sub = group_of[idx]
        ov[idx] = np.einsum("jmtl,jml->jt", win[groups_sub], w.values[idx])
        plans.append((idx, groups_sub, int(d), pad_head))

    tape = _tape_of(h, w)
    out = DiffTensor._result(ov, tape)
    if tape is not None:
        hv, wv = h.values, w.values

        def backward(go: np.ndarray) -> None:
            # Windows are recomputed per dilation; adjoints for w gather per
            # index set, adjoints for h scatter through the padded buffer.
            if w.tape is not None:
                gw_full = np.zeros_like(wv)
                for idx, groups_sub, d, pad_head in plans:
                    win, _, _ = _padded_windows(hv, ext, d, "same_zero")
                    gw_full[idx] = np.einsum("jt,jmtl->jml", go[idx], win[groups_sub])
                w._accumulate(gw_full)
            if h.tape is not None:
                gh = np.zeros_like(hv)
                for idx, groups_sub, d, pad_head in plans:
                    eff = (ext - 1) * d + 1
                    ghp = np.zeros((k1, m, t + eff - 1), dtype=go.dtype)
                    for l in range(ext):
                        contrib = wv[idx, :, l][:, :, None] * go[idx][:, None, :]
                        np.add.at(ghp[:, :, l * d : l * d + t], groups_sub, contrib)
                    gh += ghp[:, :, pad_head : pad_head + t]
                h._accumulate(gh)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# pooling and mixing

def moving_average(x, window: int, stride: int = 1) -> DiffTensor:
    """Arithmetic-mean pooling along the last axis of a 2-D tensor.

    With ``stride == 1`` the output keeps the input length: each position
    averages the in-bounds part of a window centred like same-padding
    (head-heavy for even windows), so edge means are over fewer samples.
    With ``stride > 1`` only fully in-bounds windows are taken and the
    output length is ``floor((T - window) / stride) + 1``.
    """
    x = _wrap(x)
    if x.ndim != 2:
        raise DimensionError(f"moving_average expects a 2-D tensor, got {x.shape}")
    if window < 1:
        raise DimensionError("window must be >= 1")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    k, t = x.shape
    if window > t:
        raise DimensionError(f"window {window} exceeds length {t}")

    if window == 1 and stride == 1:
        # Exact identity; skip the cumulative sums.
        tape = x.tape
        out = DiffTensor._result(x.values.copy(), tape)
        if tape is not None:
            tape.record(out, lambda go: x._accumulate(go))
        return out

    if stride == 1:
        pad_head = window // 2  # same-padding convention: extra zero at head
        lo = np.maximum(np.arange(t) - pad_head, 0)
        hi = np.minimum(np.arange(t) - pad_head + window, t)
    else:
        n_out = (t - window) // stride + 1
        lo = np.arange(n_out) * stride
        hi = lo + window
    counts = (hi - lo).astype(x.dtype)

    cs = np.concatenate([np.zeros((k, 1), dtype=x.dtype), np.cumsum(x.values, axis=1)], axis=1)
    ov = (cs[:, hi] - cs[:, lo]) / counts

    tape = x.tape
    out = DiffTensor._result(ov, tape)
    if tape is not None:

        def backward(go: np.ndarray) -> None:
            # Each output spreads adjoint/count uniformly over its window;
            # accumulate with a difference array, then prefix-sum.
            c = go / counts
            diff = np.zeros((k, t + 1), dtype=go.dtype)
            np.add.at(diff, (slice(None), lo), c)
            np.add.at(diff, (slice(None), hi), -c)
            x._accumulate(np.cumsum(diff[:, :-1], axis=1))

        tape.record(out, backward)
    return out


def pointwise_mix(x, mixing) -> DiffTensor:
    """Mix latent channels at each time step: ``out = mixing @ x``.

    ``mixing`` is a dense (K, K) matrix; every output channel is a learned
    combination of all input channels, shared across time.
    """
    x, mixing = _wrap(x), _wrap(mixing)
    if x.ndim != 2 or mixing.ndim != 2:
        raise DimensionError("pointwise_mix expects 2-D tensors")
    if mixing.shape[0] != mixing.shape[1] or mixing.shape[1] != x.shape[0]:
        raise DimensionError(
            f"mixing shape {mixing.shape} incompatible with input {x.shape}"
        )
    return matmul(mixing, x)
