"""AdamW with global-norm gradient clipping, deterministic and in-place.

The optimizer owns the only mutation path for parameter tensors.  Missing
or None gradients are treated as zeros (decoupled weight decay still
applies); non-finite gradients abort with the offending parameter's name.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autodiff import Tensor


class GradientError(RuntimeError):
    """A gradient contained NaN or Inf."""


def global_grad_norm(grads: dict[str, Optional[np.ndarray]]) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_by_global_norm(grads: dict[str, Optional[np.ndarray]], clip: float
                        ) -> tuple[dict[str, Optional[np.ndarray]], float]:
    """Scale all gradients by min(1, clip/norm); returns the pre-clip norm."""
    if clip <= 0:
        raise ValueError(f"clip norm must be positive, got {clip}")
    norm = global_grad_norm(grads)
    if norm <= clip or norm == 0.0:
        return grads, norm
    factor = clip / norm
    return {k: (None if g is None else g * factor) for k, g in grads.items()}, norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay is skipped for 1-d parameters (biases, layer-norm gains), the
    usual convention.  step() returns the pre-clip global gradient norm.
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: Optional[float] = None):
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params}
        self.v = {n: np.zeros_like(t.data) for n, t in params}

    def step(self, grads: dict[str, Optional[np.ndarray]]) -> float:
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
        if self.clip_norm is not None:
            grads, norm = clip_by_global_norm(grads, self.clip_norm)
        else:
            norm = global_grad_norm(grads)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - (self.lr * update).astype(p.data.dtype)
        return norm
