"""AdamW with a linear-warmup + cosine-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Param


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear warmup over the first warmup_frac of steps, then cosine decay."""
    warm = max(int(cfg.warmup_frac * total_steps), 1)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    t = (step - warm) / max(total_steps - warm, 1)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * t))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Param], cfg: OptimizerConfig):
        self.params = dict(sorted(params.items()))
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.value -= lr * (update + c.weight_decay * p.value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0
