from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor


class Adam:
    """Adam over a list of tensors, with optional per-element freezing.

    A frozen element keeps its value and its moment estimates untouched for
    that step, so freezing is exact rather than approximate.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.data, dtype=np.float64) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data, dtype=np.float64) for p in self.params}

    def step(self, grads: dict[int, Tensor], frozen: dict[int, np.ndarray] | None = None) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p in self.params:
            g = grads.get(p.id)
            if g is None:
                continue
            g = g.data.astype(np.float64)
            m, v = self.m[p.id], self.v[p.id]
            new_m = self.b1 * m + (1 - self.b1) * g
            new_v = self.b2 * v + (1 - self.b2) * g * g
            update = self.lr * (new_m / c1) / (np.sqrt(new_v / c2) + self.eps)
            mask = None if frozen is None else frozen.get(p.id)
            if mask is not None and mask.any():
                keep = ~mask
                m[keep] = new_m[keep]
                v[keep] = new_v[keep]
                p.data[keep] = (p.data[keep] - update[keep]).astype(DTYPE)
            else:
                m[...] = new_m
                v[...] = new_v
                p.data[...] = (p.data - update).astype(DTYPE)
