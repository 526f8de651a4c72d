"""Adam / AdamW, learning-rate schedules and gradient clipping."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float | None) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    norm = grad_norm(params)
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Adam:
    """Adam with optional decoupled weight decay (AdamW).

    Only the parameters handed in are tracked; callers exclude frozen
    parameters up front so no optimizer state exists for them.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params: list[Tensor] = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameters given to optimizer")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= (lr * upd).astype(p.data.dtype, copy=False)


def AdamW(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
    return Adam(params, lr, betas, eps, weight_decay, decoupled=True)


def make_optimizer(kind: str, params, lr, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
    if kind == "adam":
        return Adam(params, lr, betas, eps, weight_decay)
    if kind == "adamw":
        return AdamW(params, lr, betas, eps, weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


SCHEDULES = ("constant", "linear-warmup-linear", "linear-warmup-cosine")


def lr_at(step: int, base_lr: float, kind: str = "constant", warmup: int = 0, total: int = 1,
          min_ratio: float = 0.0) -> float:
    """Learning rate for 0-based ``step``."""
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}")
    if kind == "constant":
        return base_lr
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    if kind == "linear-warmup-linear":
        scale = 1.0 - frac
    else:
        scale = 0.5 * (1.0 + math.cos(math.pi * frac))
    return base_lr * (min_ratio + (1.0 - min_ratio) * scale)
