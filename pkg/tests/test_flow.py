import math

import pytest
import torch
from hypothesis import given, strategies as st

from flowsr.container import load_checkpoint
from flowsr.degradation import DegradationSpec
from flowsr.errors import ConfigError, NumericError, UsageError
from flowsr.flow import (FlowConfig, GaussianTask, LossTrace, SRTask, discrepancy, flow_matching_loss, interpolate,
                         perturb, sample_time, train_teacher, velocity_matching_loss)
from flowsr.model import DTYPE, Arch, init_velocity_model
from flowsr.oracles import GaussianFlowSpec, gaussian_velocity_coefficient

from conftest import randn


def test_perturb_cases(gen):
    x = randn(gen, 5)
    eps = randn(gen, 5)
    assert torch.equal(perturb(x, 0.0, eps), x)
    assert torch.equal(perturb(x, 1.0, eps), eps)
    one = torch.tensor([1.0], dtype=DTYPE)
    assert float(perturb(one, 0.6, 0.5 * one)) == pytest.approx(1.1, abs=1e-15)
    for bad in (-0.1, 1.1):
        with pytest.raises(ConfigError):
            perturb(x, bad, eps)


def test_vp_second_moment(gen):
    x = randn(gen, 100_000)
    eps = randn(gen, 100_000)
    m = float((perturb(x, 0.5, eps) ** 2).mean())
    assert abs(m - float((x * x).mean())) <= 0.02


def test_interpolate_cases(gen):
    x0, x1 = randn(gen, 4), randn(gen, 4)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    assert float(interpolate(torch.zeros(1, dtype=DTYPE), torch.full((1,), 2.0, dtype=DTYPE), 0.25)) == 0.5


@given(st.floats(0, 1))
def test_interpolate_fixed_point(t):
    x = torch.linspace(-2, 3, 7, dtype=DTYPE)
    assert torch.allclose(interpolate(x, x, t), x, rtol=0, atol=1e-15)


def test_sample_time_moments_and_determinism():
    g = torch.Generator().manual_seed(0)
    t = sample_time(g, (0.01, 0.99), 100_000)
    assert float(t.min()) >= 0.01 and float(t.max()) <= 0.99
    assert abs(float(t.mean()) - 0.5) <= 3 * 0.98 / math.sqrt(12 * 1e5)
    a = sample_time(torch.Generator().manual_seed(4), (0.0, 1.0), 10)
    b = sample_time(torch.Generator().manual_seed(4), (0.0, 1.0), 10)
    assert torch.equal(a, b)
    assert isinstance(sample_time(torch.Generator().manual_seed(4), (0.0, 1.0)), float)


def test_loss_zero_at_exact_target(gen):
    x0, x1 = randn(gen, 6, 3), randn(gen, 6, 3)
    oracle = lambda x, c, t: x1 - x0  # noqa: E731
    assert float(velocity_matching_loss(oracle, x0, x1, None, 0.4, "l2")) == 0.0


def test_zero_model_l2(gen):
    x0, x1 = randn(gen, 6, 3), randn(gen, 6, 3)
    zero = lambda x, c, t: torch.zeros_like(x)  # noqa: E731
    got = float(velocity_matching_loss(zero, x0, x1, None, 0.4, "l2"))
    assert got == pytest.approx(float(((x1 - x0) ** 2).sum()) / x0.numel(), rel=1e-14)


def test_l1_constant_residual():
    r = torch.full((4, 5), -0.3, dtype=DTYPE)
    assert float(discrepancy(r, "l1")) == pytest.approx(0.3, rel=1e-15)
    with pytest.raises(ConfigError):
        discrepancy(r, "huber")


def test_flow_matching_loss_empty_batch(mlp_model):
    with pytest.raises(UsageError):
        flow_matching_loss(mlp_model, torch.zeros((0, 2), dtype=DTYPE), FlowConfig(scale=2), 0)


def test_flow_matching_loss_deterministic():
    arch = Arch("mlp", (2,), 2, (8,), 4)
    m = init_velocity_model(arch, 0)
    x1 = torch.randn((16, 2), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    cfg = FlowConfig(scale=2, sigma_n=0.05)
    a = flow_matching_loss(m, x1, cfg, 9)
    assert torch.equal(a, flow_matching_loss(m, x1, cfg, 9))
    assert not torch.equal(a, flow_matching_loss(m, x1, cfg, 10))


def test_config_validation():
    with pytest.raises(ConfigError):
        FlowConfig(sigma_p=1.5)
    with pytest.raises(ConfigError):
        FlowConfig(t_min=0.5, t_max=0.5)
    with pytest.raises(ConfigError):
        FlowConfig(discrepancy="l3")
    with pytest.raises(ConfigError):
        FlowConfig(ema=1.0)


def _toy_task(sp=0.1):
    data = torch.randn((256, 2), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    return SRTask(data, DegradationSpec(2, 0.05, spatial_dims=1), sp)


def test_train_is_deterministic_and_writes_outputs(tmp_path):
    cfg = FlowConfig(iterations=30, batch=16, lr=1e-3, warmup=5, ema=0.9, scale=2, sigma_n=0.05)
    m1, tr1 = train_teacher(_toy_task(), cfg, widths=(8,), checkpoint_path=tmp_path / "a.ofts",
                            trace_path=tmp_path / "a.csv")
    m2, tr2 = train_teacher(_toy_task(), cfg, widths=(8,))
    assert tr1.column("loss") == tr2.column("loss")
    back = load_checkpoint(tmp_path / "a.ofts")
    assert torch.equal(back.ema["out.bias"], m1.ema["out.bias"])
    head = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert head == "iteration,loss,lr,wall_ms"


def test_loss_trace_decreases():
    cfg = FlowConfig(iterations=600, batch=64, lr=3e-3, warmup=20, ema=0.9, scale=2, discrepancy="l2")
    _, tr = train_teacher(_toy_task(), cfg, widths=(32, 32))
    loss = tr.column("loss")
    blocks = [sum(loss[i:i + 100]) / 100 for i in range(0, 600, 100)]
    assert blocks[-1] < blocks[0]
    assert all(b2 <= b1 * 1.05 for b1, b2 in zip(blocks, blocks[1:]))


def test_nan_loss_aborts_with_checkpoint(tmp_path):
    task = _toy_task()
    model = init_velocity_model(task.arch((8,)), 0)
    with torch.no_grad():
        model.params["out.bias"].fill_(float("nan"))
    cfg = FlowConfig(iterations=5, batch=8, scale=2)
    with pytest.raises(NumericError):
        train_teacher(task, cfg, model=model, checkpoint_path=tmp_path / "last.ofts")
    assert (tmp_path / "last.ofts").exists()


def test_gaussian_task_loss_floor():
    """The trained loss cannot beat E Var(x1 - x0 | x_t), computed from the analytic field."""
    spec = GaussianFlowSpec(1.0, 0.5)
    task = GaussianTask(1.0, 0.5)
    cfg = FlowConfig(iterations=1500, batch=256, lr=1e-3, warmup=100, ema=0.99, discrepancy="l2", sigma_p=0.0)
    model, _ = train_teacher(task, cfg, widths=(32, 32))
    g = torch.Generator().manual_seed(42)
    n = 200_000
    x0, x1, cond = task.sample(g, n)
    t = torch.rand(n, generator=g, dtype=DTYPE)
    with torch.no_grad():
        xt = interpolate(x0, x1, t)
        resid_model = model.field(ema=True)(xt, cond, t) - (x1 - x0)
        a = torch.as_tensor(gaussian_velocity_coefficient(t, spec))[:, None]
        resid_opt = a * xt - (x1 - x0)
    lm, lo = (resid_model ** 2).reshape(-1), (resid_opt ** 2).reshape(-1)
    diff = lm - lo
    se = float(diff.std() / math.sqrt(n))
    assert float(diff.mean()) >= -3 * se


def test_loss_trace_csv(tmp_path):
    tr = LossTrace(("iteration", "loss"))
    tr.append(1, 0.1)
    tr.append(2, 1 / 3)
    tr.write_csv(tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[2] == "2,0.3333333333333333"
