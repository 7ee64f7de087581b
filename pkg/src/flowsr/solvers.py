"""Integrators for dx/dt = v(x, cond, t) on [0, 1], single-step final-state
estimates, and the straightness of a learned flow."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import ConfigError, NumericError, RangeError, StiffnessError
from .model import DTYPE

FIXED_KINDS = ("euler", "midpoint", "heun", "ralston")
KINDS = FIXED_KINDS + ("rk45",)

# two-stage explicit schemes: (stage time fraction c2, weight b1, weight b2)
RK2_TABLEAUS = {
    "midpoint": (0.5, 0.0, 1.0),
    "heun": (1.0, 0.5, 0.5),
    "ralston": (2.0 / 3.0, 0.25, 0.75),
}

# Dormand-Prince 5(4)
DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DP_B = DP_A[6] + (0.0,)
DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

SAFETY = 0.9
FACTOR_MIN, FACTOR_MAX = 0.2, 5.0
PI_ALPHA, PI_BETA = 0.17, 0.04
H_FLOOR = 1e-10


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "rk45"
    steps: int = 10
    tol: float = 1e-3
    rtol: float | None = None
    record_stride: int = 1
    max_steps: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in KINDS:
            raise ConfigError(f"unknown solver {self.kind!r}; choose from {KINDS}")
        if self.kind == "rk45":
            if not self.tol > 0:
                raise ConfigError("rk45 needs tol > 0")
        elif self.steps < 1:
            raise ConfigError("fixed-step solvers need steps >= 1")
        if self.record_stride < 1:
            raise ConfigError("record_stride must be >= 1")

    @property
    def atol(self) -> float:
        return self.tol

    @property
    def rtol_(self) -> float:
        return self.tol if self.rtol is None else self.rtol


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0

    def record(self, t: float, x: torch.Tensor) -> None:
        self.times.append(float(t))
        self.states.append(x.detach().clone())


class _Counted:
    def __init__(self, v, cond):
        self.v = v
        self.cond = cond
        self.nfe = 0

    def __call__(self, x, t):
        self.nfe += 1
        out = self.v(x, self.cond, t)
        return out.detach() if out.requires_grad else out


def solve(v: Callable, x0: torch.Tensor, cond, spec: SolverSpec, t0: float = 0.0, t1: float = 1.0):
    """Integrate from ``t0`` to ``t1``. Returns ``(x_end, Trajectory)``.

    A batched ``x0`` is integrated as one system; RK45 then uses a single step
    size controlled by the RMS error over the whole batch.
    """
    if not torch.isfinite(x0).all():
        raise NumericError("initial state is not finite")
    if not t1 > t0:
        raise RangeError(f"need t1 > t0, got [{t0}, {t1}]")
    f = _Counted(v, cond)
    traj = Trajectory()
    traj.record(t0, x0)
    with torch.no_grad():
        if spec.kind == "rk45":
            x = _rk45(f, x0, t0, t1, spec, traj)
        else:
            x = _fixed(f, x0, t0, t1, spec, traj)
    traj.nfe = f.nfe
    return x, traj


def _fixed(f, x, t0, t1, spec, traj):
    h = (t1 - t0) / spec.steps
    for i in range(spec.steps):
        t = t0 + i * h
        x = x + h * _slope(f, x, t, h, spec.kind)
        if not torch.isfinite(x).all():
            raise NumericError(f"state became non-finite at t={t + h:.6g}")
        if (i + 1) % spec.record_stride == 0 or i + 1 == spec.steps:
            traj.record(t1 if i + 1 == spec.steps else t + h, x)
        traj.accepted += 1
    return x


def _slope(f, x, t, h, kind):
    if kind == "euler":
        return f(x, t)
    c2, b1, b2 = RK2_TABLEAUS[kind]
    k1 = f(x, t)
    k2 = f(x + (c2 * h) * k1, t + c2 * h)
    return b1 * k1 + b2 * k2 if b1 else b2 * k2


def _rms(x: torch.Tensor) -> float:
    return float(torch.sqrt(torch.mean(x * x)))


def _rk45(f, x, t0, t1, spec, traj):
    atol, rtol = spec.atol, spec.rtol_
    k1 = f(x, t0)
    sc = atol + rtol * x.abs()
    d0, d1 = _rms(x / sc), _rms(k1 / sc)
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(h, t1 - t0)
    t = t0
    err_prev = 1e-4
    n_acc = 0
    while t < t1:
        if traj.accepted + traj.rejected >= spec.max_steps:
            raise StiffnessError(f"exceeded {spec.max_steps} steps at t={t:.6g}")
        if h < H_FLOOR:
            raise StiffnessError(f"step size fell below {H_FLOOR} at t={t:.6g}")
        last = t + h >= t1 - 1e-14
        if last:
            h = t1 - t
        ks = [k1]
        for i in range(1, 7):
            xi = x
            for a, k in zip(DP_A[i], ks):
                if a:
                    xi = xi + (h * a) * k
            if i == 6:
                x_new = xi
            ks.append(f(xi, t + DP_C[i] * h))
        err = sum((h * e) * k for e, k in zip(DP_E, ks) if e)
        sc = atol + rtol * torch.maximum(x.abs(), x_new.abs())
        err_norm = _rms(err / sc)
        if not math.isfinite(err_norm) or not torch.isfinite(x_new).all():
            traj.rejected += 1
            h *= FACTOR_MIN
            continue
        if err_norm <= 1.0:
            t = t1 if last else t + h
            x = x_new
            k1 = ks[6]
            traj.accepted += 1
            n_acc += 1
            if n_acc % spec.record_stride == 0 or t >= t1:
                traj.record(t, x)
            factor = SAFETY * max(err_norm, 1e-10) ** -PI_ALPHA * err_prev ** PI_BETA
            factor = min(FACTOR_MAX, max(FACTOR_MIN, factor))
            err_prev = max(err_norm, 1e-4)
            h *= factor
        else:
            traj.rejected += 1
            factor = SAFETY * err_norm ** -PI_ALPHA
            h *= min(1.0, max(FACTOR_MIN, factor))
    return x


def solve_each(v: Callable, x0: torch.Tensor, cond, spec: SolverSpec, t0: float = 0.0, t1: float = 1.0):
    """Solve every batch item separately; returns ``(x_end, per-item NFE list)``."""
    ends, nfes = [], []
    for i in range(x0.shape[0]):
        c = None if cond is None else cond[i:i + 1]
        x, traj = solve(v, x0[i:i + 1], c, spec, t0, t1)
        ends.append(x)
        nfes.append(traj.nfe)
    return torch.cat(ends, dim=0), nfes


def _bcast(t, like: torch.Tensor):
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (like.ndim - 1))


def estimate_final(x_t: torch.Tensor, t, v_value: torch.Tensor) -> torch.Tensor:
    """One-evaluation estimate of the endpoint: x_t + (1 - t) v."""
    t_ = torch.as_tensor(t, dtype=DTYPE)
    if ((t_ < 0) | (t_ > 1)).any():
        raise RangeError("t must lie in [0, 1]")
    return x_t + (1.0 - _bcast(t, x_t)) * v_value


def teacher_slope(v: Callable, x_t: torch.Tensor, cond, t, dt: float, kind: str = "midpoint") -> torch.Tensor:
    """Effective slope k of one step of size ``dt`` so that the step is ``x_t + dt * k``.

    ``t`` may be a float or a per-item tensor.
    """
    return teacher_slope_parts(v, x_t, cond, t, dt, kind)[0]


def teacher_slope_parts(v: Callable, x_t, cond, t, dt: float, kind: str = "midpoint"):
    """Like :func:`teacher_slope` but also returns the first stage v(x_t, t)."""
    kind = kind.lower()
    if kind not in FIXED_KINDS:
        raise ConfigError(f"teacher slope kind must be one of {FIXED_KINDS}, got {kind!r}")
    t_ = torch.as_tensor(t, dtype=DTYPE)
    if (t_ + dt > 1.0 + 1e-12).any():
        raise RangeError(f"t + dt exceeds 1 (max t={float(t_.max()):.6g}, dt={dt})")
    k1 = v(x_t, cond, t)
    if kind == "euler":
        return k1, k1
    c2, b1, b2 = RK2_TABLEAUS[kind]
    t2 = t_ + c2 * dt if t_.ndim else float(t_) + c2 * dt
    k2 = v(x_t + (c2 * dt) * k1, cond, t2)
    return b1 * k1 + b2 * k2, k1


def straightness(v: Callable, sampler: Callable, K: int, N: int, seed: int, chunk: int = 250_000) -> float:
    """Midpoint-rule estimate of  int_0^1 E||v(x_t, t) - (x1 - x0)||^2 dt.

    ``sampler(gen, n)`` returns a coupling ``(x0, x1, cond)`` of ``n`` items.
    The squared norm sums over all non-batch axes.
    """
    if K < 1 or N < 1:
        raise ConfigError("K and N must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    total = 0.0
    with torch.no_grad():
        for k in range(K):
            t = (k + 0.5) / K
            acc, done = 0.0, 0
            while done < N:
                n = min(chunk, N - done)
                x0, x1, cond = sampler(gen, n)
                xt = (1 - t) * x0 + t * x1
                d = v(xt, cond, t) - (x1 - x0)
                acc += float((d * d).reshape(n, -1).sum(dim=1).sum())
                done += n
            total += acc / N
    return total / K
