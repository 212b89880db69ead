"""Optimizers, gradient clipping and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0."""
    base, warm, total = schedule.base_lr, schedule.warmup_steps, schedule.total_steps
    if warm > 0 and step < warm:
        return base * step / warm
    if total <= warm:
        return base
    progress = min(max((step - warm) / (total - warm), 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Tensor], max_norm: float | None) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Optimizer:
    def __init__(self, named_params: list[tuple[str, Tensor]]):
        self.named_params = list(named_params)
        self.params = [p for _, p in self.named_params]
        self.step_count = 0
        self.lr = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        self._update()

    def _update(self) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count


class SGD(Optimizer):
    """Plain gradient descent, no momentum or decay."""

    def _update(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad


class AdamW(Optimizer):
    def __init__(self, named_params, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.05,
                 no_decay: set[str] | None = None):
        super().__init__(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        no_decay = no_decay or set()
        self.decay = [name not in no_decay for name, _ in self.named_params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self) -> None:
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        lr = self.lr
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if decay and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), m, v in zip(self.named_params, self.m, self.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        super().load_state_dict(state, step_count)
        for i, (name, _) in enumerate(self.named_params):
            self.m[i][...] = state[f"m.{name}"]
            self.v[i][...] = state[f"v.{name}"]


def make_optimizer(name: str, model, betas=(0.9, 0.95), weight_decay: float = 0.05) -> Optimizer:
    named = list(model.named_parameters())
    if name == "sgd":
        return SGD(named)
    if name == "adamw":
        return AdamW(named, betas=betas, weight_decay=weight_decay, no_decay=model.no_decay_names())
    raise ValueError(f"unknown optimizer {name!r}")
