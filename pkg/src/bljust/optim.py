"""Per-group optimizers and the reduce-on-plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PlainGD", "AdamW", "make_optimizer", "ReduceOnPlateau", "plateau_scheduler_step"]


class PlainGD:
    name = "plain_gd"

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        return {k: params[k] - lr * grads[k] for k in params}

    def state_dict(self) -> dict:
        return {}


class AdamW:
    """Adam with decoupled weight decay (decay applied as ``p *= 1 - lr * wd``)."""

    name = "adamw"

    def __init__(self, weight_decay: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("AdamW betas must lie in [0, 1)")
        if eps <= 0 or weight_decay < 0:
            raise ValueError("AdamW needs eps > 0 and weight_decay >= 0")
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p = p * (1.0 - lr * self.weight_decay)
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def make_optimizer(name: str, **kwargs):
    if name == "plain_gd":
        return PlainGD()
    if name == "adamw":
        return AdamW(**kwargs)
    raise ValueError(f"unknown optimizer {name!r}; expected 'plain_gd' or 'adamw'")


@dataclass
class ReduceOnPlateau:
    """Multiply the learning rates by ``factor`` after ``patience`` epochs without
    a strict improvement of the best monitored loss, then reset the counter."""

    patience: int = 20
    factor: float = 0.1
    best: float = field(default=float("inf"))
    num_bad: int = 0
    reductions: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")

    def step(self, loss: float) -> bool:
        """Feed one epoch's loss; True when the rates should be reduced now."""
        if loss < self.best:
            self.best = loss
            self.num_bad = 0
            return False
        self.num_bad += 1
        if self.num_bad >= self.patience:
            self.num_bad = 0
            self.reductions += 1
            return True
        return False


def plateau_scheduler_step(history: list[float], scheduler: ReduceOnPlateau, rates: dict[str, float]) -> dict[str, float]:
    """Feed the newest validation loss in ``history``; return (possibly) reduced rates."""
    if not history:
        raise ValueError("history must be nonempty")
    if scheduler.step(history[-1]):
        return {k: v * scheduler.factor for k, v in rates.items()}
    return dict(rates)
