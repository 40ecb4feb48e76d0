from __future__ import annotations

import numpy as np

from evifed.autodiff import Tensor


class Adam:
    """Adam over a fixed-order parameter list.

    Moments are keyed by position, so a caller may swap in new tensors of the
    same shapes (e.g. after prompt aggregation) and keep the optimizer state.
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def step(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(params):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            if self.lr != 0.0:
                p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.grad = None

    def state_size(self) -> int:
        return sum(a.size for a in self.m) + sum(a.size for a in self.v)
