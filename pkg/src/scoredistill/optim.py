"""Adam over dicts of numpy arrays (or a single array)."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """In-place update of every array in ``params`` that has a gradient."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def update(self, x: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Functional single-array form: returns the updated copy of ``x``."""
        box = {"x": np.array(x, dtype=np.float64, copy=True)}
        self.step(box, {"x": np.asarray(grad, dtype=np.float64)}, lr)
        return box["x"]


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
