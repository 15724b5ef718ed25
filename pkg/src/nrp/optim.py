"""Parameter update rules: plain SGD and Adam.

Optimizers own their state and mutate parameter values in place; this is
the single sanctioned mutation of tensor data and happens on the training
thread only.  Updates are deterministic functions of (params, grads,
state, lr).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _check(name: str, p: Tensor, g: np.ndarray):
    if g.shape != p.data.shape:
        raise ShapeError(f"optimizer: gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")


class Sgd:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = float(lr)

    def step(self, grads: dict[str, np.ndarray]):
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            _check(name, p, g)
            p.data -= np.asarray(self.lr, dtype=p.dtype) * g


class Adam:
    """Adam with the standard defaults (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            _check(name, p, g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            p.data -= np.asarray(self.lr, dtype=p.dtype) * (mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
