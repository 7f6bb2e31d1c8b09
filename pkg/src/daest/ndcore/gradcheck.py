"""Finite-difference verification of tape gradients.

The checker compares analytic adjoints against central differences in
float64.  Relative error uses the symmetric denominator
``max(|analytic|, |numeric|, 1e-8)`` so tiny gradients do not blow up the
ratio.  Coordinates sitting on a piecewise boundary (a relu kink, a
changing max) make one-sided differences disagree; those coordinates are
detected and skipped rather than reported as failures.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from daest.ndcore.tensor import DiffTensor, DimensionError, Tape

__all__ = ["grad_check"]


def grad_check(
    f: Callable[[DiffTensor], DiffTensor],
    x: np.ndarray,
    eps: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    kink_rtol: float = 1e-2,
) -> float:
    """Max relative error between tape and central-difference gradients.

    Args:
        f: maps a leaf tensor to a scalar loss on the leaf's tape.
        x: evaluation point, any shape, promoted to float64.
        eps: finite-difference step.
        coords: number of randomly sampled coordinates to probe; all of
            them when None.
        rng: generator for coordinate sampling (required if coords set).
        kink_rtol: threshold on the disagreement of the two one-sided
            differences, relative to their magnitude, above which the
            coordinate is considered to sit on a kink and is skipped.

    Returns:
        The maximum relative error over the probed coordinates.
    """
    x = np.asarray(x, dtype=np.float64)

    tape = Tape()
    leaf = DiffTensor(x.copy(), tape=tape)
    loss = f(leaf)
    if loss.values.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    tape.backward(loss)
    analytic = leaf.grad.reshape(-1)
    f0 = float(loss.values)

    n = x.size
    if coords is None:
        probe = np.arange(n)
    else:
        if rng is None:
            raise ValueError("coords sampling requires an rng")
        probe = rng.choice(n, size=min(coords, n), replace=False)

    flat = x.reshape(-1)
    worst = 0.0
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _eval(f, x)
        flat[i] = orig - eps
        f_minus = _eval(f, x)
        flat[i] = orig

        d_plus = (f_plus - f0) / eps
        d_minus = (f0 - f_minus) / eps
        central = (f_plus - f_minus) / (2.0 * eps)
        # One-sided slopes disagreeing badly means the segment changed
        # within the probe interval; central differences are meaningless.
        gap = abs(d_plus - d_minus)
        if gap > kink_rtol * max(abs(d_plus), abs(d_minus), 1.0):
            continue
        err = abs(analytic[i] - central) / max(abs(analytic[i]), abs(central), 1e-8)
        worst = max(worst, err)
    return worst


def _eval(f: Callable[[DiffTensor], DiffTensor], x: np.ndarray) -> float:
    out = f(DiffTensor.constant(x.copy()))
    return float(out.values)
