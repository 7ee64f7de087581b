import pytest
import torch
from hypothesis import given, strategies as st

from flowsr.errors import ConfigError, NumericError
from flowsr.model import DTYPE, init_velocity_model
from flowsr.optim import OptimizerState, adam_step, ema_update


def _grads(model, value):
    return {k: torch.full_like(v, value) for k, v in model.params.items()}


def test_first_step_is_lr_times_sign(mlp_arch):
    m = init_velocity_model(mlp_arch, 0)
    before = {k: v.detach().clone() for k, v in m.params.items()}
    st_ = OptimizerState(lr=1e-3, warmup=0)
    for g in (0.37, -2.5):
        m2 = init_velocity_model(mlp_arch, 0)
        adam_step(OptimizerState(lr=1e-3, warmup=0), m2, _grads(m2, g))
        for k in before:
            delta = m2.params[k].detach() - before[k]
            expected = -1e-3 * (1 if g > 0 else -1)
            assert torch.allclose(delta, torch.full_like(delta, expected), rtol=1e-6, atol=0)
    assert st_.step == 0


def test_warmup_ramp():
    s = OptimizerState(lr=1e-4, warmup=1000)
    assert s.lr_at(1) == pytest.approx(1e-7)
    assert s.lr_at(500) == pytest.approx(5e-5)
    assert s.lr_at(5000) == 1e-4


def test_zero_gradient_leaves_params(mlp_model):
    before = {k: v.detach().clone() for k, v in mlp_model.params.items()}
    adam_step(OptimizerState(), mlp_model, _grads(mlp_model, 0.0))
    for k in before:
        assert torch.equal(before[k], mlp_model.params[k].detach())


def test_nan_gradient_names_parameter(mlp_model):
    g = _grads(mlp_model, 0.0)
    g["l1.bias"][0] = float("nan")
    with pytest.raises(NumericError, match="l1.bias"):
        adam_step(OptimizerState(), mlp_model, g)


def test_step_count_monotone(mlp_model):
    s = OptimizerState()
    for i in range(3):
        adam_step(s, mlp_model, _grads(mlp_model, 0.1))
        assert s.step == i + 1
    assert all(s.m[k].shape == mlp_model.params[k].shape for k in mlp_model.params)


def test_ema_formula(mlp_model):
    e0 = {k: v.clone() for k, v in mlp_model.ema.items()}
    with torch.no_grad():
        for p in mlp_model.params.values():
            p.add_(1.0)
    ema_update(mlp_model, 0.9999)
    for k, p in mlp_model.params.items():
        assert torch.allclose(mlp_model.ema[k], 0.9999 * e0[k] + 0.0001 * p.detach(), rtol=0, atol=1e-15)


def test_ema_ratio_zero_copies(mlp_model):
    with torch.no_grad():
        for p in mlp_model.params.values():
            p.mul_(3.0)
    ema_update(mlp_model, 0.0)
    for k, p in mlp_model.params.items():
        assert torch.equal(mlp_model.ema[k], p.detach())


@given(st.floats(0.0, 0.99), st.integers(1, 20))
def test_ema_geometric_decay(ratio, k):
    from flowsr.model import Arch
    m = init_velocity_model(Arch("mlp", (2,), 0, (3,), 2), 0)
    with torch.no_grad():
        for name in m.ema:
            m.ema[name].fill_(1.0)
            m.params[name].fill_(0.25)
    for _ in range(k):
        ema_update(m, ratio)
    for v in m.ema.values():
        assert torch.allclose(v - 0.25, torch.full_like(v, 0.75 * ratio ** k), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("ratio", [1.0, -0.1, float("nan")])
def test_ema_bad_ratio(mlp_model, ratio):
    with pytest.raises(ConfigError):
        ema_update(mlp_model, ratio)
