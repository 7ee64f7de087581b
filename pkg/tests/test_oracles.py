import math

import numpy as np
import pytest

from flowsr.errors import ConfigError, OracleValidationError, UnreliableEstimateError
from flowsr.oracles import (GaussianFlowSpec, analytic_gaussian_velocity, gaussian_velocity_coefficient, ideal_student,
                            linear_ode_solution, mc_velocity, validate_gaussian_velocity)


def test_coefficient_limits():
    spec = GaussianFlowSpec(1.0, 0.5)
    assert gaussian_velocity_coefficient(0.0, spec) == -1.0
    assert gaussian_velocity_coefficient(1.0, spec) == 1.0
    assert gaussian_velocity_coefficient(0.5, GaussianFlowSpec(2.0, 2.0)) == 0.0


def test_coefficient_from_moments():
    """a(t) = Cov(x_t, x1 - x0) / Var(x_t), assembled from sample moments."""
    spec = GaussianFlowSpec(1.3, 0.4)
    rng = np.random.default_rng(1)
    x0 = spec.sigma0 * rng.standard_normal(2_000_000)
    x1 = spec.sigma1 * rng.standard_normal(2_000_000)
    for t in (0.2, 0.7):
        xt = (1 - t) * x0 + t * x1
        a_mc = np.cov(xt, x1 - x0)[0, 1] / xt.var()
        assert a_mc == pytest.approx(gaussian_velocity_coefficient(t, spec), abs=5e-3)


def test_mc_velocity_matches_at_midpoint():
    spec = GaussianFlowSpec(1.0, 1.0)
    est, se = mc_velocity(0.7, 0.5, spec.sampler(), N=200_000)
    assert abs(est) <= 4 * se


def test_mc_velocity_deterministic_coupling():
    """x1 = 2 x0 makes x1 - x0 = x_t / (1 + t) exactly."""
    def draw(rng, n):
        x0 = rng.standard_normal(n)
        return x0, 2 * x0

    est, _ = mc_velocity(0.6, 0.5, draw, N=100_000, bandwidth=1e-3)
    assert est == pytest.approx(0.6 / 1.5, abs=1e-3)


def test_mc_standard_error_halves():
    spec = GaussianFlowSpec(1.0, 0.5)
    _, se1 = mc_velocity(0.3, 0.4, spec.sampler(), N=100_000)
    _, se4 = mc_velocity(0.3, 0.4, spec.sampler(), N=400_000)
    assert se4 / se1 == pytest.approx(0.5, rel=0.15)


def test_mc_errors():
    spec = GaussianFlowSpec()
    with pytest.raises(ConfigError):
        mc_velocity(0.0, 0.5, spec.sampler(), N=100)
    with pytest.raises(UnreliableEstimateError):
        mc_velocity(40.0, 0.5, spec.sampler(), N=10_000, bandwidth=0.01)
    with pytest.raises(ConfigError):
        GaussianFlowSpec(0.0, 1.0)


def test_validation_gate_catches_wrong_formula(monkeypatch):
    import flowsr.oracles as o

    monkeypatch.setattr(o, "gaussian_velocity_coefficient", lambda t, spec: 0.5)
    with pytest.raises(OracleValidationError):
        validate_gaussian_velocity(GaussianFlowSpec(1.0, 0.5), ts=(0.1,), points=5, N=100_000)


def test_analytic_velocity_validates_and_evaluates():
    spec = GaussianFlowSpec(1.0, 0.5)
    x = np.linspace(-1, 1, 5)
    assert np.allclose(analytic_gaussian_velocity(x, 0.0, spec), -x)
    assert np.allclose(analytic_gaussian_velocity(x, 1.0, spec), x)
    with pytest.raises(ValueError):
        analytic_gaussian_velocity(x, 1.5, spec)


def test_linear_ode_solution():
    assert linear_ode_solution(lambda t: 1.0, 1.0, 1.0) == pytest.approx(math.e, rel=1e-13)
    assert linear_ode_solution(lambda t: 0.0, 3.0, 0.7) == 3.0
    assert linear_ode_solution(lambda t: 5.0, 2.0, 0.0) == 2.0
    assert linear_ode_solution(lambda t: 2 * t, 1.0, 1.0) == pytest.approx(math.e, rel=1e-13)


def test_ideal_student_reproduces_flow():
    v = ideal_student(lambda t: 1.0)
    assert v(1.0, None, 0.5) * 0.5 + 1.0 == pytest.approx(math.exp(0.5), rel=1e-14)
    assert v(2.0, None, 0.0) == 2.0
