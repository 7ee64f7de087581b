"""Self-test batteries behind ``flowsr check``.

Each suite returns a list of :class:`CheckResult`; a suite passes when every
result does.  The gradient suite compares autograd against central differences
of independent reference implementations in which stop-gradient brackets are
evaluated at frozen base parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .degradation import DegradationSpec, downsample, lift, transpose_upsample
from .distill import distill_terms
from .flow import discrepancy, interpolate, perturb
from .model import DTYPE, Arch, VelocityModel, gradients, init_velocity_model, params_bytes
from .oracles import GaussianFlowSpec, gaussian_velocity_coefficient, validate_gaussian_velocity
from .solvers import FIXED_KINDS, SolverSpec, solve, teacher_slope_parts

SUITES = ("grad", "adjoint", "solver-order", "oracle")

GRAD_TOL = 1e-5
FD_STEP = 1e-6
ADJOINT_TOL = 1e-10
LIFT_TOL = 1e-12
VP_TOL = 0.02
EULER_SLOPE, EULER_SLOPE_TOL = 1.0, 0.1
RK2_SLOPE, RK2_SLOPE_TOL = 2.0, 0.15
RK45_TOLS = (1e-3, 1e-6)
TRANSPORT_TOL = 0.03


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3g} (tol {self.tol:.3g}) {self.detail}".rstrip()


# ---------------------------------------------------------------- gradients

def _small_models(seed: int, kind: str):
    if kind == "mlp":
        arch = Arch("mlp", (3,), 3, (8, 8), time_dim=4)
    else:
        arch = Arch("conv", (1, 8, 8), 1, (4, 4), time_dim=4, patch=2)
    student = init_velocity_model(arch, seed)
    teacher = init_velocity_model(arch, seed + 100)
    teacher.ema = {k: v.clone() for k, v in teacher.params.items()}
    teacher.freeze()
    return arch, student, teacher


def _batch(arch: Arch, n: int, gen: torch.Generator):
    x0 = torch.randn((n,) + arch.x_shape, generator=gen, dtype=DTYPE)
    x1 = torch.randn((n,) + arch.x_shape, generator=gen, dtype=DTYPE)
    cond = torch.randn((n,) + arch.cond_shape, generator=gen, dtype=DTYPE)
    t = 0.05 + 0.85 * torch.rand(n, generator=gen, dtype=DTYPE)
    return x0, x1, cond, t


def _bt(t, like):
    return t.reshape((-1,) + (1,) * (like.ndim - 1))


def _ref_losses(student: VelocityModel, teacher: VelocityModel, x0, x1, cond, t, dt, kind):
    """Reference losses ``name -> f(live_params, frozen_params)``, written from the formulas."""
    v_th = teacher.field(ema=True)

    def f(p):
        return student.field(params=p)

    s = t + dt
    tb, sb = _bt(t, x0), _bt(s, x0)

    def slope(p0):
        v_t0 = f(p0)(x0, cond, t)
        x_t0 = x0 + tb * v_t0
        k, k1 = teacher_slope_parts(v_th, x_t0, cond, t, dt, kind)
        return v_t0, x_t0, k, k1

    def flow_l2(p, p0):
        return discrepancy(f(p)(interpolate(x0, x1, t), cond, t) - (x1 - x0), "l2")

    def flow_l1(p, p0):
        return discrepancy(f(p)(interpolate(x0, x1, t), cond, t) - (x1 - x0), "l1")

    def trajectory(p, p0):
        v_t0, _, k, _ = slope(p0)
        target = v_t0 + (dt / sb) * (k - v_t0)
        return ((f(p)(x0, cond, s) - target) ** 2).mean()

    def pinn(p, p0):
        _, _, k, _ = slope(p0)
        v_s, v_t = f(p)(x0, cond, s), f(p)(x0, cond, t)
        return (((sb / dt) * (v_s - v_t) + v_t - k) ** 2).mean()

    def boot(p, p0):
        v_t0, x_t0, _, k1 = slope(p0)
        lam = 1.0 - tb * (1.0 - sb) / (sb * (1.0 - tb))
        x_phi_t0 = x0 + v_t0
        x_th = x_t0 + (1.0 - tb) * k1
        target = x_phi_t0 + lam * (x_th - x_phi_t0)
        return (((x0 + f(p)(x0, cond, s) - target) ** 2) / lam ** 2).mean()

    def align(p, p0):
        _, _, _, k1 = slope(p0)
        return (((1.0 - tb) * (f(p)(x0, cond, t) - k1)) ** 2).mean()

    def bc(p, p0):
        return ((f(p)(x0, cond, 0.0) - v_th(x0, cond, 0.0)) ** 2).mean()

    def total(p, p0):
        return trajectory(p, p0) + 0.01 * align(p, p0) + 0.1 * bc(p, p0)

    return {"flow-l2": flow_l2, "flow-l1": flow_l1, "trajectory": trajectory, "pinn": pinn,
            "boot": boot, "align": align, "bc": bc, "total": total}


def _lib_losses(student: VelocityModel, teacher: VelocityModel, x0, x1, cond, t, dt, kind):
    """The same losses through the library code paths, as ``name -> f(params)``."""
    v_th = teacher.field(ema=True)

    def terms(p, variant, la=0.0, lb=0.0):
        return distill_terms(student.field(params=p), v_th, x0, cond, t, dt, kind, variant, la, lb)

    def flow(kind_):
        return lambda p: discrepancy(
            student.field(params=p)(interpolate(x0, x1, t), cond, t) - (x1 - x0), kind_)

    return {
        "flow-l2": flow("l2"),
        "flow-l1": flow("l1"),
        "trajectory": lambda p: terms(p, "trajectory")["distill"],
        "pinn": lambda p: terms(p, "pinn")["distill"],
        "boot": lambda p: terms(p, "boot")["distill"],
        "align": lambda p: terms(p, "trajectory")["align"],
        "bc": lambda p: terms(p, "trajectory", 0.0, 1.0)["bc"],
        "total": lambda p: terms(p, "trajectory", 0.01, 0.1)["total"],
    }


def _fd_check(name, lib_fn, ref_fn, params, coords: int, gen: torch.Generator) -> CheckResult:
    p_live = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    g = gradients(lib_fn(p_live), p_live)
    base = {k: v.detach().clone() for k, v in params.items()}
    names = list(base)
    sizes = [base[k].numel() for k in names]
    total = sum(sizes)
    picks = torch.randperm(total, generator=gen)[:coords].tolist()
    flat_offsets = np.cumsum([0] + sizes)
    worst, gmax = 0.0, 0.0
    with torch.no_grad():
        for idx in picks:
            j = int(np.searchsorted(flat_offsets, idx, side="right") - 1)
            key, off = names[j], idx - flat_offsets[j]
            vals = []
            for sign in (1.0, -1.0):
                p = {k: v.clone() for k, v in base.items()}
                p[key].view(-1)[off] += sign * FD_STEP
                vals.append(float(ref_fn(p, base)))
            fd = (vals[0] - vals[1]) / (2 * FD_STEP)
            ga = float(g[key].view(-1)[off])
            worst = max(worst, abs(ga - fd))
            gmax = max(gmax, abs(ga), abs(fd))
    rel = worst / max(gmax, 1e-300)
    return CheckResult(f"grad/{name}", rel <= GRAD_TOL, rel, GRAD_TOL, f"({len(picks)} coords)")


def grad_suite(seed: int = 0, coords: int = 60, dt: float = 0.05) -> list:
    results = []
    gen = torch.Generator().manual_seed(seed)
    for kind_net in ("mlp", "conv"):
        arch, student, teacher = _small_models(seed, kind_net)
        x0, x1, cond, t = _batch(arch, 4, gen)
        for slope in ("euler", "midpoint"):
            refs = _ref_losses(student, teacher, x0, x1, cond, t, dt, slope)
            libs = _lib_losses(student, teacher, x0, x1, cond, t, dt, slope)
            for name in refs:
                if slope != "euler" and name.startswith("flow"):
                    continue
                r = _fd_check(f"{kind_net}/{slope}/{name}", libs[name], refs[name], student.params, coords, gen)
                results.append(r)
    results.extend(stop_gradient_suite(seed))
    return results


# ----------------------------------------------------------- stop-gradient

class _SplitField:
    """Student field whose evaluations at time ``t_sg`` use parameters ``sg``
    and all other times use ``live``."""

    def __init__(self, model: VelocityModel, live, sg, t_sg: float):
        self.live, self.sg, self.t_sg = model.field(params=live), model.field(params=sg), t_sg

    def __call__(self, x, cond, t):
        tv = torch.as_tensor(t)
        if tv.ndim == 0 and abs(float(tv) - self.t_sg) < 1e-15:
            return self.sg(x, cond, t)
        return self.live(x, cond, t)


def stop_gradient_suite(seed: int = 0, t: float = 0.5, dt: float = 0.05) -> list:
    """Gradients into stop-gradient brackets are exactly zero, while perturbing
    the bracket still changes the loss."""
    results = []
    arch, student, teacher = _small_models(seed, "mlp")
    gen = torch.Generator().manual_seed(seed + 7)
    x0, _, cond, _ = _batch(arch, 4, gen)
    for variant in ("trajectory", "boot"):
        live = {k: v.detach().clone().requires_grad_(True) for k, v in student.params.items()}
        sg = {k: v.detach().clone().requires_grad_(True) for k, v in student.params.items()}
        field = _SplitField(student, live, sg, t)
        loss = distill_terms(field, teacher.field(ema=True), x0, cond, t, dt, "midpoint", variant)["distill"]
        g_sg = gradients(loss, sg)
        g_live = gradients(loss, live)
        zero = max(float(v.abs().max()) for v in g_sg.values())
        nonzero = max(float(v.abs().max()) for v in g_live.values())
        bumped = {k: v.detach() + 1e-3 * torch.randn(v.shape, generator=gen, dtype=DTYPE) for k, v in sg.items()}
        field2 = _SplitField(student, live, bumped, t)
        with torch.no_grad():
            loss2 = distill_terms(field2, teacher.field(ema=True), x0, cond, t, dt, "midpoint", variant)["distill"]
        ok = zero == 0.0 and nonzero > 0 and float(loss2) != float(loss.detach())
        results.append(CheckResult(f"stop-grad/{variant}", ok, zero, 0.0,
                                   f"(live grad {nonzero:.2g}, bracket moves loss {float(loss2 - loss.detach()):.2g})"))
    # teacher inside SG[k] for every variant: no gradient reaches its weights
    tp = {k: v.detach().clone().requires_grad_(True) for k, v in teacher.ema.items()}
    v_th = teacher.field(params=tp)
    for variant in ("trajectory", "pinn", "boot"):
        p = {k: v.detach().clone().requires_grad_(True) for k, v in student.params.items()}
        terms = distill_terms(student.field(params=p), v_th, x0, cond, t, dt, "midpoint", variant, 0.01, 0.1)
        g = gradients(terms["total"], tp)
        zero = max(float(v.abs().max()) for v in g.values())
        results.append(CheckResult(f"stop-grad/teacher-{variant}", zero == 0.0, zero, 0.0))
    return results


def teacher_untouched_check(teacher: VelocityModel, run: Callable[[], object]) -> CheckResult:
    before = params_bytes(teacher.params) + params_bytes(teacher.ema)
    run()
    same = params_bytes(teacher.params) + params_bytes(teacher.ema) == before
    return CheckResult("stop-grad/teacher-bytes", same, 0.0 if same else 1.0, 0.0)


# ------------------------------------------------------------- operators

def adjoint_suite(seed: int = 0, vp_draws: int = 100_000, sigma_p: float = 0.5) -> list:
    gen = torch.Generator().manual_seed(seed)
    results = []
    cases = [("H-2d-s4", DegradationSpec(4, spatial_dims=2), (3, 1, 32, 32)),
             ("H-2d-s2", DegradationSpec(2, spatial_dims=2), (3, 2, 16, 8)),
             ("H-1d-s2", DegradationSpec(2, spatial_dims=1), (5, 2))]
    for name, spec, shape in cases:
        x = torch.randn(shape, generator=gen, dtype=DTYPE)
        y = torch.randn(downsample(x, spec).shape, generator=gen, dtype=DTYPE)
        lhs = float((downsample(x, spec) * y).sum())
        rhs = float((x * transpose_upsample(y, spec, x.shape[-spec.spatial_dims:])).sum())
        err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        results.append(CheckResult(f"adjoint/{name}", err <= ADJOINT_TOL, err, ADJOINT_TOL, "<Hx,y> vs <x,H^T y>"))
        lift_err = float((downsample(lift(y, spec), spec) - y).abs().max())
        results.append(CheckResult(f"lift/{name}", lift_err <= LIFT_TOL, lift_err, LIFT_TOL, "H(lift(y)) - y"))
    x_lr = torch.randn(vp_draws, generator=gen, dtype=DTYPE)
    eps = torch.randn(vp_draws, generator=gen, dtype=DTYPE)
    m_in = float((x_lr * x_lr).mean())
    m_out = float((perturb(x_lr, sigma_p, eps) ** 2).mean())
    rel = abs(m_out - m_in) / m_in
    results.append(CheckResult(f"vp/sigma_p={sigma_p}", rel <= VP_TOL, rel, VP_TOL,
                               f"E[x0^2]={m_out:.4f} vs E[x_lr^2]={m_in:.4f}"))
    return results


# --------------------------------------------------------------- solvers

def _exp_field(x, cond, t):
    return x


def convergence_slope(kind: str, steps=(8, 16, 32, 64, 128)) -> float:
    x0 = torch.ones((1, 1), dtype=DTYPE)
    errs = []
    for n in steps:
        x, _ = solve(_exp_field, x0, None, SolverSpec(kind, steps=n))
        errs.append(abs(float(x) - math.e))
    h = np.log(1.0 / np.asarray(steps, dtype=float))
    return float(np.polyfit(h, np.log(errs), 1)[0])


class _Counter:
    def __init__(self, v):
        self.v, self.calls = v, 0

    def __call__(self, x, cond, t):
        self.calls += 1
        return self.v(x, cond, t)


def solver_order_suite() -> list:
    results = []
    for kind in FIXED_KINDS:
        slope = convergence_slope(kind)
        target, tol = (EULER_SLOPE, EULER_SLOPE_TOL) if kind == "euler" else (RK2_SLOPE, RK2_SLOPE_TOL)
        dev = abs(slope - target)
        results.append(CheckResult(f"order/{kind}", dev <= tol, slope, tol, f"(expected {target})"))
    x0 = torch.ones((1, 1), dtype=DTYPE)
    for tol in RK45_TOLS:
        x, traj = solve(_exp_field, x0, None, SolverSpec("rk45", tol=tol))
        err = abs(float(x) - math.e)
        results.append(CheckResult(f"rk45/tol={tol:g}", err <= 10 * tol, err, 10 * tol, f"(nfe {traj.nfe})"))
    for kind, stages in (("euler", 1), ("midpoint", 2), ("heun", 2), ("ralston", 2), ("rk45", None)):
        f = _Counter(_exp_field)
        _, traj = solve(f, x0, None, SolverSpec(kind, steps=7, tol=1e-6))
        expected = stages * 7 if stages else f.calls
        ok = traj.nfe == f.calls == expected
        if kind == "rk45":
            ok = ok and traj.nfe == 1 + 6 * (traj.accepted + traj.rejected)
        results.append(CheckResult(f"nfe/{kind}", ok, traj.nfe, 0.0, f"(counted {f.calls})"))
    return results


# ---------------------------------------------------------------- oracles

def oracle_suite(seed: int = 0, sigma0: float = 1.0, sigma1: float = 0.5, N: int = 1_000_000,
                 transport_draws: int = 100_000) -> list:
    spec = GaussianFlowSpec(sigma0, sigma1)
    results = []
    for t in (0.1, 0.5, 0.9):
        try:
            rows = validate_gaussian_velocity(spec, ts=(t,), points=21, N=N, seed=seed)
            worst = max(abs(est - exact) / se for _, _, exact, est, se in rows)
            results.append(CheckResult(f"mc-velocity/t={t}", True, worst, 3.0, "(max |diff|/se over 21 points)"))
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            results.append(CheckResult(f"mc-velocity/t={t}", False, float("nan"), 3.0, str(exc)))
    gen = torch.Generator().manual_seed(seed)
    x0 = sigma0 * torch.randn((transport_draws, 1), generator=gen, dtype=DTYPE)

    def v(x, cond, t):
        return float(gaussian_velocity_coefficient(float(t), spec)) * x

    x1, _ = solve(v, x0, None, SolverSpec("rk45", tol=1e-8))
    rel = abs(float(x1.var()) - sigma1 ** 2) / sigma1 ** 2
    results.append(CheckResult("transport/variance", rel <= TRANSPORT_TOL, rel, TRANSPORT_TOL,
                               f"(endpoint var {float(x1.var()):.5f}, target {sigma1 ** 2:.5f})"))
    return results


def run_suite(name: str, seed: int = 0) -> tuple[list, float]:
    start = time.perf_counter()
    if name == "grad":
        res = grad_suite(seed)
    elif name == "adjoint":
        res = adjoint_suite(seed)
    elif name == "solver-order":
        res = solver_order_suite()
    elif name == "oracle":
        res = oracle_suite(seed)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return res, time.perf_counter() - start
