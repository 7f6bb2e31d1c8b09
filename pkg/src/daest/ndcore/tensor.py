"""Tape-based reverse-mode automatic differentiation over dense arrays.

The core objects are :class:`DiffTensor`, a dense numpy array paired with a
lazily allocated adjoint, and :class:`Tape`, the single-owner record of one
differentiable forward pass.  Operations in :mod:`daest.ndcore.ops` compute
values eagerly and, when any input is attached to a tape, record a closure
that scatters the output adjoint back onto the inputs.  Calling
``tape.backward(loss)`` replays those closures in reverse order.

Conventions:

* float64 everywhere during training; float32 is accepted for
  inference-only forwards (no tape attached).
* A tensor built with a tape is a *leaf* (a parameter): the tape remembers
  it and ``tape.reset()`` clears its adjoint.  Tensors returned by
  operations inherit the tape but are not leaves; their adjoints die with
  the recorded nodes.
* Constants (``tape=None``) never receive adjoints, so wrapping input data
  as constants keeps the backward pass cheap.
* Parameter values may be updated in place only between a ``reset`` and the
  next forward pass; recorded closures capture the arrays they need.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "DiffTensor",
    "Tape",
    "NdcoreError",
    "DimensionError",
    "NumericError",
    "set_debug",
    "debug_enabled",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checking inside activation operations."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


class NdcoreError(Exception):
    """Base class for numeric-core failures."""


class DimensionError(NdcoreError):
    """Shapes, grouping, or extents of an operation's arguments disagree."""


class NumericError(NdcoreError):
    """Non-finite values found where finite ones are required."""


class Tape:
    """Single-owner record of one differentiable forward pass.

    The tape holds ``(output, backward_closure)`` nodes in execution order,
    which is already a topological order, so the backward pass is a simple
    reversed sweep.  One tape serves one training loop: run a forward pass,
    call :meth:`backward`, apply the optimizer, then :meth:`reset` and
    reuse it for the next step.
    """

    __slots__ = ("_nodes", "_leaves")

    def __init__(self) -> None:
        self._nodes: list[tuple[DiffTensor, Callable[[np.ndarray], None]]] = []
        self._leaves: list[DiffTensor] = []

    def watch(self, tensor: "DiffTensor") -> None:
        """Register a leaf whose adjoint survives until the next reset."""
        self._leaves.append(tensor)

    def record(self, out: "DiffTensor", backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: "DiffTensor") -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's adjoint.

        ``loss`` must be a scalar produced on this tape.  Repeated calls
        without a reset keep accumulating, which is occasionally useful and
        never silent magic.
        """
        if not isinstance(loss, DiffTensor):
            raise TypeError("backward expects a DiffTensor loss")
        if loss.values.size != 1:
            raise DimensionError(
                f"backward requires a scalar loss, got shape {loss.values.shape}"
            )
        if loss.tape is not self:
            raise NdcoreError("loss was not produced on this tape")
        loss._accumulate(np.ones_like(loss.values))
        for out, fn in reversed(self._nodes):
            adj = out.adjoint
            if adj is not None:
                fn(adj)

    def reset(self) -> None:
        """Drop recorded nodes and zero every leaf adjoint."""
        self._nodes.clear()
        for leaf in self._leaves:
            leaf.adjoint = None

    @property
    def n_nodes(self) -> int:
        return len(self._nodes)


class DiffTensor:
    """A dense array plus a lazily allocated adjoint of the same shape.

    ``adjoint`` is ``None`` until the backward pass touches the tensor;
    :attr:`grad` materializes zeros in that case, so "no gradient yet" and
    "zero gradient" read the same.
    """

    __slots__ = ("values", "adjoint", "tape")

    def __init__(self, values, tape: Tape | None = None, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.adjoint: np.ndarray | None = None
        self.tape: Tape | None = tape
        if tape is not None:
            tape.watch(self)

    @classmethod
    def constant(cls, values, dtype=None) -> "DiffTensor":
        """Wrap data that never needs a gradient."""
        return cls(values, tape=None, dtype=dtype)

    @staticmethod
    def _result(values: np.ndarray, tape: Tape | None) -> "DiffTensor":
        # Internal: op outputs carry the tape but are not leaves.
        t = DiffTensor.__new__(DiffTensor)
        t.values = values
        t.adjoint = None
        t.tape = tape
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self) -> np.ndarray:
        """The adjoint, materialized as zeros when never touched."""
        if self.adjoint is None:
            return np.zeros_like(self.values)
        return self.adjoint

    def _accumulate(self, delta: np.ndarray) -> None:
        if self.adjoint is None:
            self.adjoint = np.zeros_like(self.values)
        self.adjoint += delta

    def detached(self) -> "DiffTensor":
        """A constant view of the same values (shares the array)."""
        return DiffTensor._result(self.values, None)

    def __repr__(self) -> str:
        owner = "leaf" if self in getattr(self.tape, "_leaves", ()) else (
            "node" if self.tape is not None else "const"
        )
        return f"DiffTensor(shape={self.values.shape}, dtype={self.values.dtype}, {owner})"
