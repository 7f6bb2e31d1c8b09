"""Minimal reverse-mode autodiff core: tensors, ops, checking, optimization."""

from daest.ndcore.tensor import (
    DiffTensor,
    DimensionError,
    NdcoreError,
    NumericError,
    Tape,
    debug_enabled,
    set_debug,
)
from daest.ndcore.ops import (
    ConvSpec,
    add,
    conv_time,
    conv_time_broadcast,
    cosine_similarity_matrix,
    exp,
    flatten,
    l2_normalize_rows,
    linear,
    log,
    matmul,
    mean_all,
    mean_axis,
    moving_average,
    mul,
    neg,
    pointwise_mix,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_channels,
    spatial_transition_conv,
    stack_rows,
    sub,
    sum_all,
    sum_axis,
    take_pairs,
    transpose,
)
from daest.ndcore.gradcheck import grad_check
from daest.ndcore.optim import Adam
from daest.ndcore.snapshot import (
    SnapshotError,
    array_from_snapshot,
    read_snapshot,
    snapshot_bytes,
    write_snapshot,
)

__all__ = [
    "DiffTensor",
    "Tape",
    "NdcoreError",
    "DimensionError",
    "NumericError",
    "set_debug",
    "debug_enabled",
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
    "grad_check",
    "Adam",
    "SnapshotError",
    "write_snapshot",
    "read_snapshot",
    "snapshot_bytes",
    "array_from_snapshot",
]
