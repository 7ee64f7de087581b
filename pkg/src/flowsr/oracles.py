"""Closed-form and Monte-Carlo ground truths for 1-D Gaussian flows.

For independent zero-mean endpoints x0 ~ N(0, s0^2), x1 ~ N(0, s1^2) and
x_t = (1 - t) x0 + t x1, the pair (x_t, x1 - x0) is jointly Gaussian, so the
optimal rectified-flow velocity is linear in x:

    v*(x, t) = a(t) x,   a(t) = Cov(x_t, x1 - x0) / Var(x_t)
                              = (t s1^2 - (1 - t) s0^2) / ((1 - t)^2 s0^2 + t^2 s1^2).

The formula is only trusted after it agrees with a kernel-regression estimate
of E[x1 - x0 | x_t = x] (see :func:`validate_gaussian_velocity`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import integrate

from .distill import distill_loss_trajectory
from .errors import ConfigError, OracleValidationError, UnreliableEstimateError

MIN_ESS = 30.0
_VALIDATED: set = set()


@dataclass(frozen=True)
class GaussianFlowSpec:
    sigma0: float = 1.0
    sigma1: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ConfigError("Gaussian endpoint stds must be positive")

    def std_t(self, t):
        return np.sqrt((1 - t) ** 2 * self.sigma0 ** 2 + t ** 2 * self.sigma1 ** 2)

    def sampler(self) -> Callable:
        def draw(rng: np.random.Generator, n: int):
            return self.sigma0 * rng.standard_normal(n), self.sigma1 * rng.standard_normal(n)
        return draw


def gaussian_velocity_coefficient(t, spec: GaussianFlowSpec):
    s0, s1 = spec.sigma0 ** 2, spec.sigma1 ** 2
    return (t * s1 - (1 - t) * s0) / ((1 - t) ** 2 * s0 + t ** 2 * s1)


def mc_velocity(x: float, t: float, sampler: Callable, N: int = 200_000, bandwidth: float | None = None,
                seed: int = 0):
    """Nadaraya-Watson estimate of E[x1 - x0 | x_t = x] with a Gaussian kernel.

    Returns ``(estimate, standard_error)``.  ``sampler(rng, n)`` draws ``n``
    scalar couplings ``(x0, x1)``.
    """
    if N < 10_000:
        raise ConfigError(f"mc_velocity needs N >= 1e4, got {N}")
    rng = np.random.default_rng(seed)
    x0, x1 = sampler(rng, N)
    xt = (1 - t) * x0 + t * x1
    y = x1 - x0
    if bandwidth is None:
        bandwidth = 0.05 * float(np.std(xt))
    if bandwidth <= 0:
        # degenerate x_t (e.g. a point mass); fall back to a tiny absolute width
        bandwidth = 1e-3
    w = np.exp(-0.5 * ((xt - x) / bandwidth) ** 2)
    sw = w.sum()
    ess = sw * sw / max((w * w).sum(), 1e-300)
    if not ess >= MIN_ESS:
        raise UnreliableEstimateError(f"effective sample size {ess:.1f} < {MIN_ESS} at x={x}, t={t}")
    est = float((w * y).sum() / sw)
    se = float(math.sqrt((w * w * (y - est) ** 2).sum()) / sw)
    return est, se


def validate_gaussian_velocity(spec: GaussianFlowSpec, ts=(0.1, 0.5, 0.9), points: int = 21,
                               N: int = 1_000_000, seed: int = 0, n_se: float = 3.0) -> list:
    """Compare a(t) x against :func:`mc_velocity` on a grid of ``points`` x-values
    spanning +-2 std(x_t) at each t.  Raises :class:`OracleValidationError` on any
    disagreement beyond ``n_se`` standard errors; returns the comparison rows."""
    rows = []
    draw = spec.sampler()
    for t in ts:
        sd = float(spec.std_t(t))
        for j, x in enumerate(np.linspace(-2 * sd, 2 * sd, points)):
            est, se = mc_velocity(float(x), t, draw, N=N, bandwidth=0.02 * sd, seed=seed + j)
            exact = float(gaussian_velocity_coefficient(t, spec) * x)
            rows.append((t, float(x), exact, est, se))
            if abs(est - exact) > n_se * se:
                raise OracleValidationError(
                    f"analytic velocity {exact:.5g} vs MC {est:.5g} +- {se:.2g} at t={t}, x={x:.4g}")
    _VALIDATED.add((spec.sigma0, spec.sigma1))
    return rows


def analytic_gaussian_velocity(x, t, spec: GaussianFlowSpec):
    """v*(x, t) = a(t) x; validates the formula against Monte Carlo on first use."""
    if (spec.sigma0, spec.sigma1) not in _VALIDATED:
        validate_gaussian_velocity(spec, points=7, N=400_000)
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("t must lie in [0, 1]")
    return gaussian_velocity_coefficient(t, spec) * x


def linear_ode_solution(a: Callable[[float], float], x0, t: float):
    """Exact flow map of dx/dt = a(t) x: x0 * exp(int_0^t a)."""
    if t == 0:
        return x0
    val, err = integrate.quad(a, 0.0, t, epsabs=1e-14, epsrel=1e-13, limit=200)
    if not (math.isfinite(val) and err < 1e-10):
        raise ArithmeticError(f"quadrature did not converge (estimate {val}, error {err})")
    return x0 * math.exp(val)


def ideal_student(a: Callable[[float], float]):
    """Student field that reproduces the exact flow of dx/dt = a(t) x:
    v(x0, t) = (Phi_t(x0) - x0) / t, and a(0) x0 at t = 0."""
    def v(x0, cond, t):
        t = float(t)
        if t == 0:
            return a(0.0) * x0
        return (linear_ode_solution(a, x0, t) - x0) / t
    return v


def truncation_slopes(a: Callable[[float], float], kind: str, dts=(0.2, 0.1, 0.05, 0.025), t: float = 0.5,
                      x0: float = 1.0):
    """Log-log slope of the ideal student's trajectory loss (and of its RMS
    residual) against dt, with the teacher slope from ``kind`` on v = a(t) x."""
    v_phi = ideal_student(a)

    def v_theta(x, cond, tt):
        return a(float(tt)) * x

    x = torch.full((1, 1), x0, dtype=torch.float64)
    losses = [float(distill_loss_trajectory(v_phi, v_theta, x, None, t, dt, kind)) for dt in dts]
    logd = np.log(np.asarray(dts))
    slope = float(np.polyfit(logd, np.log(losses), 1)[0])
    return slope, slope / 2.0, losses
