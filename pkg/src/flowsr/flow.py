"""Stage 1: noise-augmented conditional rectified-flow training."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import torch

from .container import save_checkpoint
from .degradation import DegradationSpec, build_lr_condition
from .errors import ConfigError, NumericError, UsageError
from .model import DTYPE, Arch, VelocityModel, gradients, init_velocity_model
from .optim import OptimizerState, adam_step, ema_update

log = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    sigma_p: float = 0.1
    sigma_n: float = 0.0
    scale: int = 4
    discrepancy: str = "l1"
    t_min: float = 0.0
    t_max: float = 1.0
    batch: int = 32
    iterations: int = 1000
    lr: float = 1e-4
    warmup: int = 1000
    ema: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        self.discrepancy = self.discrepancy.lower()
        if not 0.0 <= self.sigma_p <= 1.0:
            raise ConfigError(f"sigma_p must lie in [0, 1], got {self.sigma_p}")
        if self.discrepancy not in ("l1", "l2"):
            raise ConfigError(f"discrepancy must be l1 or l2, got {self.discrepancy!r}")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ConfigError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")
        if self.batch < 1 or self.iterations < 0:
            raise ConfigError("batch must be >= 1 and iterations >= 0")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError(f"ema ratio must lie in [0, 1), got {self.ema}")

    @property
    def t_range(self) -> tuple[float, float]:
        return (self.t_min, self.t_max)

    def degradation(self, spatial_dims: int = 2) -> DegradationSpec:
        return DegradationSpec(scale=self.scale, sigma_n=self.sigma_n, spatial_dims=spatial_dims)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def perturb(x_lr: torch.Tensor, sigma_p: float, eps: torch.Tensor) -> torch.Tensor:
    """Variance-preserving perturbation sqrt(1 - sigma_p^2) x_lr + sigma_p eps."""
    if not 0.0 <= sigma_p <= 1.0:
        raise ConfigError(f"sigma_p must lie in [0, 1], got {sigma_p}")
    if eps.shape != x_lr.shape:
        raise ConfigError("eps must match the shape of x_lr")
    return math.sqrt(1.0 - sigma_p * sigma_p) * x_lr + sigma_p * eps


def _bt(t, like):
    t = torch.as_tensor(t, dtype=DTYPE)
    return t if t.ndim == 0 else t.reshape((-1,) + (1,) * (like.ndim - 1))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ConfigError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    tt = _bt(t, x0)
    return (1.0 - tt) * x0 + tt * x1


def sample_time(gen: torch.Generator, t_range, n: int | None = None):
    lo, hi = t_range
    u = torch.rand(1 if n is None else n, generator=gen, dtype=DTYPE)
    t = lo + (hi - lo) * u
    return float(t[0]) if n is None else t


def discrepancy(residual: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "l1":
        return residual.abs().mean()
    if kind == "l2":
        return (residual * residual).mean()
    raise ConfigError(f"unknown discrepancy {kind!r}")


def velocity_matching_loss(v, x0, x1, cond, t, kind: str = "l2") -> torch.Tensor:
    """mean D(v(x_t, cond, t), x1 - x0) over batch and elements."""
    xt = interpolate(x0, x1, t)
    return discrepancy(v(xt, cond, t) - (x1 - x0), kind)


class SRTask:
    """Couplings (x0, x1, cond) for conditional super-resolution of a fixed dataset."""

    def __init__(self, data: torch.Tensor, degradation: DegradationSpec, sigma_p: float):
        if data.shape[0] < 1:
            raise UsageError("dataset is empty")
        self.data = data.to(DTYPE)
        self.degradation = degradation
        self.sigma_p = sigma_p
        perturb(self.data[:1], sigma_p, torch.zeros_like(self.data[:1]))

    @property
    def x_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def cond_channels(self) -> int:
        return self.x_shape[0]

    def arch(self, widths, time_dim: int = 16) -> Arch:
        kind = "mlp" if len(self.x_shape) == 1 else "conv"
        return Arch(kind, self.x_shape, self.cond_channels, tuple(widths), time_dim)

    def couple(self, x1: torch.Tensor, gen: torch.Generator):
        cond = build_lr_condition(x1, self.degradation, gen)
        eps = torch.randn(cond.shape, generator=gen, dtype=DTYPE)
        return perturb(cond, self.sigma_p, eps), x1, cond

    def sample(self, gen: torch.Generator, n: int):
        idx = torch.randint(self.data.shape[0], (n,), generator=gen)
        return self.couple(self.data[idx], gen)


class GaussianTask:
    """Unconditional coupling of independent N(0, sigma0^2) and N(0, sigma1^2)."""

    def __init__(self, sigma0: float = 1.0, sigma1: float = 0.5, dim: int = 1):
        self.sigma0, self.sigma1, self.dim = sigma0, sigma1, dim

    @property
    def x_shape(self) -> tuple[int, ...]:
        return (self.dim,)

    cond_channels = 0

    def arch(self, widths, time_dim: int = 16) -> Arch:
        return Arch("mlp", self.x_shape, 0, tuple(widths), time_dim)

    def sample(self, gen: torch.Generator, n: int):
        x0 = self.sigma0 * torch.randn((n, self.dim), generator=gen, dtype=DTYPE)
        x1 = self.sigma1 * torch.randn((n, self.dim), generator=gen, dtype=DTYPE)
        return x0, x1, x0.new_zeros((n, 0))


def flow_matching_loss(model: VelocityModel, x1: torch.Tensor, cfg: FlowConfig, seed,
                       params=None, spatial_dims: int | None = None) -> torch.Tensor:
    """Recorded teacher loss on a batch of HR samples ``x1``.

    Builds the LR condition, perturbs it, draws one t per item and regresses the
    velocity onto ``x1 - x0`` with the configured discrepancy.
    """
    if x1.shape[0] == 0:
        raise UsageError("empty batch")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if spatial_dims is None:
        spatial_dims = 1 if x1.ndim == 2 else 2
    task = SRTask(x1, cfg.degradation(spatial_dims), cfg.sigma_p)
    x0, _, cond = task.couple(x1, gen)
    t = sample_time(gen, cfg.t_range, x1.shape[0])
    return velocity_matching_loss(model.field(params=params), x0, x1, cond, t, cfg.discrepancy)


@dataclass
class LossTrace:
    columns: tuple
    rows: list = field(default_factory=list)

    def append(self, *values) -> None:
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([v if isinstance(v, int) else repr(float(v)) for v in r])


def train_teacher(task, cfg: FlowConfig, model: VelocityModel | None = None, widths=(64, 64, 64),
                  checkpoint_path=None, trace_path=None, log_every: int = 0, meta=None):
    """Train a velocity model on ``task`` couplings; returns ``(model, LossTrace)``."""
    if model is None:
        model = init_velocity_model(task.arch(widths), cfg.seed)
    model.check_mutable()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = OptimizerState(lr=cfg.lr, warmup=cfg.warmup)
    trace = LossTrace(("iteration", "loss", "lr", "wall_ms"))
    v = model.field()
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        x0, x1, cond = task.sample(gen, cfg.batch)
        t = sample_time(gen, cfg.t_range, cfg.batch)
        loss = velocity_matching_loss(v, x0, x1, cond, t, cfg.discrepancy)
        if not torch.isfinite(loss):
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, {**(meta or {}), "stage": "teacher", "iteration": it - 1})
            raise NumericError(
                f"non-finite teacher loss at iteration {it}; last good model"
                + (f" saved to {checkpoint_path}" if checkpoint_path else " kept in memory"))
        lr = adam_step(opt, model, gradients(loss, model.params))
        ema_update(model, cfg.ema)
        trace.append(it, float(loss.detach()), lr, (time.perf_counter() - start) * 1e3)
        if log_every and it % log_every == 0:
            log.info("teacher it=%d loss=%.5g lr=%.3g", it, float(loss.detach()), lr)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, {**(meta or {}), "stage": "teacher", "iteration": cfg.iterations})
    if trace_path is not None:
        trace.write_csv(trace_path)
    return model, trace
