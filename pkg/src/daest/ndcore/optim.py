"""Adam parameter updates with additive L2 weight decay."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from daest.ndcore.tensor import DiffTensor

__all__ = ["Adam"]


class Adam:
    """Adam over a fixed list of leaf tensors.

    Weight decay is classic additive L2: the decay term joins the raw
    gradient before the moment updates.  ``step()`` reads each parameter's
    current adjoint, so call it after ``tape.backward`` and before
    ``tape.reset``.
    """

    def __init__(
        self,
        params: Iterable[DiffTensor],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params: Sequence[DiffTensor] = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
