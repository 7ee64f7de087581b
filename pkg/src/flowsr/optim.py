"""Adam with linear warmup, and EMA of parameters."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, DimensionError, NumericError
from .model import ParamSet, VelocityModel


@dataclass
class OptimizerState:
    lr: float = 1e-4
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=OrderedDict)
    v: dict = field(default_factory=OrderedDict)

    def lr_at(self, step: int) -> float:
        """Learning rate used on optimizer step ``step`` (1-based)."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


def adam_step(state: OptimizerState, model: VelocityModel, grads: ParamSet) -> float:
    """Apply one bias-corrected Adam update in place; returns the learning rate used."""
    model.check_mutable()
    for name, g in grads.items():
        if name not in model.params or g.shape != model.params[name].shape:
            raise DimensionError(f"gradient {name!r} does not match parameter shape")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    lr = state.lr_at(state.step)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = model.params[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return lr


def ema_update(model: VelocityModel, ratio: float) -> None:
    """ema <- ratio * ema + (1 - ratio) * params, elementwise."""
    if not (0.0 <= ratio < 1.0) or math.isnan(ratio):
        raise ConfigError(f"EMA ratio must lie in [0, 1), got {ratio}")
    model.check_mutable()
    with torch.no_grad():
        for name, p in model.params.items():
            model.ema[name].mul_(ratio).add_(p, alpha=1.0 - ratio)
