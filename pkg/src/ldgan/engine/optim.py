"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ldgan.errors import ShapeError
from ldgan.engine.tensor import Tensor


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params]
        self.v = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params]
        self.step = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One in-place Adam update; ``None`` gradients are skipped.

    ``params`` may be Tensors or raw arrays; the update touches ``.data``
    only, never the tape.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        buf = p.data if isinstance(p, Tensor) else p
        if g.shape != buf.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {buf.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        buf -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Convenience wrapper reading gradients off the tensors themselves."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
