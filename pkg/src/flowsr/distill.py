"""Stage 2: one-step student distillation along the teacher's ODE trajectory.

The student ``v_phi(x0, cond, t)`` predicts the endpoint ``x0 + v_phi`` for any
dial value ``t``; its implied intermediate states ``x0 + t v_phi`` are trained to
lie on one teacher trajectory.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields

import torch

from .container import save_checkpoint
from .errors import ConfigError, DegenerateConfigError, NumericError, RangeError
from .flow import LossTrace, sample_time
from .model import DTYPE, VelocityModel, gradients, params_bytes
from .optim import OptimizerState, adam_step, ema_update
from .solvers import FIXED_KINDS, teacher_slope_parts

log = logging.getLogger(__name__)

VARIANTS = ("trajectory", "pinn", "boot")


@dataclass
class DistillConfig:
    dt: float = 0.05
    lambda_align: float = 0.01
    lambda_bc: float = 0.1
    variant: str = "trajectory"
    slope_kind: str = "midpoint"
    t_min: float = 0.01
    t_max: float = 0.99
    batch: int = 32
    iterations: int = 1000
    lr: float = 1e-4
    warmup: int = 1000
    ema: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.lower()
        self.slope_kind = self.slope_kind.lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.slope_kind not in FIXED_KINDS:
            raise ConfigError(f"slope_kind must be one of {FIXED_KINDS}, got {self.slope_kind!r}")
        if not 0.0 < self.dt < 1.0:
            raise ConfigError(f"dt must lie in (0, 1), got {self.dt}")
        for name in ("lambda_align", "lambda_bc"):
            val = getattr(self, name)
            if not (val >= 0.0 and val < float("inf")):
                raise ConfigError(f"{name} must be finite and >= 0, got {val}")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ConfigError("need 0 <= t_min < t_max <= 1")
        if self.t_min + self.dt > 1.0:
            raise ConfigError("t_min + dt exceeds 1; no valid t remains")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError(f"ema ratio must lie in [0, 1), got {self.ema}")

    @property
    def t_range(self) -> tuple[float, float]:
        # clamp so that s = t + dt never exceeds 1
        return (self.t_min, min(self.t_max, 1.0 - self.dt))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _bt(t, like):
    t = torch.as_tensor(t, dtype=DTYPE)
    return t if t.ndim == 0 else t.reshape((-1,) + (1,) * (like.ndim - 1))


def _plus(t, dt):
    return t + dt if isinstance(t, torch.Tensor) else float(t) + dt


def student_one_step(v_phi, x0, cond, t):
    """Endpoint estimate x0 + v_phi(x0, t); ``t`` is the fidelity/realism dial."""
    return x0 + v_phi(x0, cond, t)


def student_intermediate(v_phi, x0, cond, t):
    """Implied state on the trajectory at time t: x0 + t v_phi(x0, t)."""
    return x0 + _bt(t, x0) * v_phi(x0, cond, t)


def trajectory_target(v_t, k, s, dt):
    return v_t + (dt / s) * (k - v_t)


def boot_lambda(t, s):
    lam = 1.0 - t * (1.0 - s) / (s * (1.0 - t))
    if torch.as_tensor(lam == 0).any():
        raise DegenerateConfigError("boot weight lambda is zero (s == t)")
    return lam


def _check_s(t, dt):
    s = torch.as_tensor(_plus(t, dt), dtype=DTYPE)
    if (s > 1.0 + 1e-12).any():
        raise RangeError(f"s = t + dt exceeds 1 (max {float(s.max()):.6g})")


def _teacher(v_theta, x_t, cond, t, dt, kind):
    with torch.no_grad():
        k, k1 = teacher_slope_parts(v_theta, x_t.detach(), cond, t, dt, kind)
    return k.detach(), k1.detach()


def distill_terms(v_phi, v_theta, x0, cond, t, dt, kind="midpoint", variant="trajectory",
                  lambda_align=0.0, lambda_bc=0.0) -> dict:
    """All loss terms of one distillation step, sharing network evaluations.

    Returns a dict with recorded scalars ``distill``, ``align``, ``bc``, ``total``.
    ``t`` is a float or a per-item tensor.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "pinn" and dt == 0:
        raise ZeroDivisionError("pinn loss needs dt > 0")
    _check_s(t, dt)
    s = _plus(t, dt)
    tb, sb = _bt(t, x0), _bt(s, x0)
    v_t = v_phi(x0, cond, t)
    v_s = v_phi(x0, cond, s)
    x_t = x0 + tb * v_t
    k, k1 = _teacher(v_theta, x_t, cond, t, dt, kind)

    if variant == "trajectory":
        target = trajectory_target(v_t, k, sb, dt).detach()
        distill = ((v_s - target) ** 2).mean()
    elif variant == "pinn":
        resid = (sb / dt) * (v_s - v_t) + v_t - k
        distill = (resid ** 2).mean()
    else:
        if (torch.as_tensor(t) >= 1).any():
            raise RangeError("boot loss needs t < 1")
        lam = boot_lambda(tb, sb)
        x_phi_s = x0 + v_s
        x_phi_t = x0 + v_t
        x_theta = x_t + (1.0 - tb) * k1
        target = (x_phi_t + lam * (x_theta - x_phi_t)).detach()
        distill = (((x_phi_s - target) ** 2) / lam ** 2).mean()

    terms = {"distill": distill}
    align = ((1.0 - tb) * (v_t - k1)) ** 2
    terms["align"] = align.mean()
    if lambda_bc:
        terms["bc"] = boundary_loss(v_phi, v_theta, x0, cond)
    else:
        terms["bc"] = torch.zeros((), dtype=DTYPE)
    terms["total"] = total_loss(terms["distill"], terms["align"], terms["bc"], lambda_align, lambda_bc)
    return terms


def distill_loss_trajectory(v_phi, v_theta, x0, cond, t, dt, kind="midpoint"):
    """|| v_phi(x0, s) - SG[v_phi(x0, t) + dt/s (k - v_phi(x0, t))] ||^2, s = t + dt."""
    return distill_terms(v_phi, v_theta, x0, cond, t, dt, kind, "trajectory")["distill"]


def distill_loss_pinn(v_phi, v_theta, x0, cond, t, dt, kind="euler"):
    """|| s/dt (v_phi(s) - v_phi(t)) + v_phi(t) - SG[k] ||^2."""
    return distill_terms(v_phi, v_theta, x0, cond, t, dt, kind, "pinn")["distill"]


def distill_loss_boot(v_phi, v_theta, x0, cond, t, dt, kind="euler"):
    """Endpoint-parameterised variant weighted by 1/lambda^2."""
    return distill_terms(v_phi, v_theta, x0, cond, t, dt, kind, "boot")["distill"]


def align_loss(v_phi, v_theta, x0, cond, t):
    """|| (1 - t)(v_phi(x0, t) - SG[v_theta(x_t, t)]) ||^2 with x_t = x0 + t v_phi(x0, t)."""
    tb = _bt(t, x0)
    v_t = v_phi(x0, cond, t)
    x_t = (x0 + tb * v_t).detach()
    with torch.no_grad():
        k1 = v_theta(x_t, cond, t)
    return (((1.0 - tb) * (v_t - k1.detach())) ** 2).mean()


def boundary_loss(v_phi, v_theta, x0, cond):
    with torch.no_grad():
        teacher0 = v_theta(x0, cond, 0.0).detach()
    return ((v_phi(x0, cond, 0.0) - teacher0) ** 2).mean()


def total_loss(distill, align, bc, lambda_align=0.01, lambda_bc=0.1):
    return distill + lambda_align * align + lambda_bc * bc


def distill_train(teacher: VelocityModel, task, cfg: DistillConfig, student: VelocityModel | None = None,
                  checkpoint_path=None, trace_path=None, log_every: int = 0, meta=None):
    """Distil a frozen teacher into a one-step student; returns ``(student, LossTrace)``.

    The student starts from the teacher's EMA weights unless ``student`` is given.
    The teacher is always evaluated with its EMA weights.
    """
    if student is None:
        student = VelocityModel(teacher.arch,
                                {k: v.detach().clone() for k, v in teacher.ema.items()})
    elif student.arch != teacher.arch:
        raise ConfigError("student and teacher architectures differ")
    teacher.freeze()
    before = params_bytes(teacher.params) + params_bytes(teacher.ema)
    v_theta = teacher.field(ema=True)
    v_phi = student.field()
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    opt = OptimizerState(lr=cfg.lr, warmup=cfg.warmup)
    trace = LossTrace(("iteration", "distill", "align", "bc", "total", "lr", "wall_ms"))
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        x0, _, cond = task.sample(gen, cfg.batch)
        t = sample_time(gen, cfg.t_range, cfg.batch)
        terms = distill_terms(v_phi, v_theta, x0, cond, t, cfg.dt, cfg.slope_kind, cfg.variant,
                              cfg.lambda_align, cfg.lambda_bc)
        total = terms["total"]
        if not torch.isfinite(total):
            if checkpoint_path is not None:
                save_checkpoint(student, checkpoint_path, {**(meta or {}), "stage": "distill", "iteration": it - 1})
            raise NumericError(f"non-finite distillation loss at iteration {it}")
        lr = adam_step(opt, student, gradients(total, student.params))
        ema_update(student, cfg.ema)
        trace.append(it, *(float(terms[k].detach()) for k in ("distill", "align", "bc")),
                     float(total.detach()), lr, (time.perf_counter() - start) * 1e3)
        if log_every and it % log_every == 0:
            log.info("distill it=%d total=%.5g", it, float(total.detach()))
    if params_bytes(teacher.params) + params_bytes(teacher.ema) != before:
        raise RuntimeError("teacher parameters changed during distillation")
    if checkpoint_path is not None:
        save_checkpoint(student, checkpoint_path, {**(meta or {}), "stage": "distill", "iteration": cfg.iterations})
    if trace_path is not None:
        trace.write_csv(trace_path)
    return student, trace
