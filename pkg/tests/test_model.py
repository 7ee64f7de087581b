import math

import pytest
import torch
from hypothesis import given, strategies as st

from flowsr.errors import ConfigError, DimensionError, FrozenModelError, UsageError
from flowsr.model import (DTYPE, Arch, as_tensor, embedding_frequencies, gradients, init_velocity_model,
                          params_bytes, stop_gradient, time_embedding, velocity_forward)

from conftest import randn


def test_init_is_deterministic(mlp_arch):
    a, b = init_velocity_model(mlp_arch, 7), init_velocity_model(mlp_arch, 7)
    assert params_bytes(a.params) == params_bytes(b.params)
    assert params_bytes(a.ema) == params_bytes(a.params)


def test_init_seed_changes_params(mlp_arch):
    a, b = init_velocity_model(mlp_arch, 7), init_velocity_model(mlp_arch, 8)
    assert params_bytes(a.params) != params_bytes(b.params)


@pytest.mark.parametrize("arch", [Arch("mlp", (5,), 2, (6,), 4), Arch("conv", (2, 8, 8), 2, (4, 4), 4, patch=4)])
def test_final_layer_width(arch):
    m = init_velocity_model(arch, 0)
    out = m.params["out.weight"].shape[0]
    expected = arch.x_shape[0] if arch.kind == "mlp" else arch.x_shape[0] * arch.patch ** 2
    assert out == expected


@pytest.mark.parametrize("widths", [(0, 4), (4, -1), ()])
def test_zero_width_rejected(widths):
    with pytest.raises(ConfigError):
        Arch("mlp", (2,), 0, widths, 4)


def test_odd_time_dim_rejected():
    with pytest.raises(ConfigError):
        Arch("mlp", (2,), 0, (4,), 5)
    with pytest.raises(ConfigError):
        time_embedding(0.3, 7)


def test_embedding_at_zero():
    e = time_embedding(0.0, 8)
    assert e.shape == (8,)
    assert torch.equal(e[:4], torch.zeros(4, dtype=DTYPE))
    assert torch.equal(e[4:], torch.ones(4, dtype=DTYPE))


@given(st.floats(0.0, 1.0 - 1e-6), st.sampled_from([2, 4, 16, 32]))
def test_embedding_lipschitz(t, d):
    delta = torch.linalg.norm(time_embedding(t + 1e-6, d) - time_embedding(t, d))
    bound = float(embedding_frequencies(d).max()) * 1e-6 * math.sqrt(d)
    assert float(delta) <= bound


def test_embedding_rejects_out_of_range():
    with pytest.raises(ValueError):
        time_embedding(1.5, 4)


@pytest.mark.parametrize("fixture", ["mlp_arch", "conv_arch"])
def test_forward_shape_and_purity(fixture, request, gen):
    arch = request.getfixturevalue(fixture)
    m = init_velocity_model(arch, 3)
    x = randn(gen, 5, *arch.x_shape)
    c = randn(gen, 5, *arch.cond_shape)
    out = velocity_forward(m, x, c, 0.3)
    assert out.shape == x.shape
    assert torch.equal(out, velocity_forward(m, x, c, 0.3))
    per_item = velocity_forward(m, x, c, torch.full((5,), 0.3, dtype=DTYPE))
    assert torch.equal(out, per_item)


def test_zero_final_layer_gives_zero(mlp_model, gen):
    with torch.no_grad():
        mlp_model.params["out.weight"].zero_()
        mlp_model.params["out.bias"].zero_()
    out = velocity_forward(mlp_model, randn(gen, 4, 3), randn(gen, 4, 2), 0.7)
    assert torch.equal(out, torch.zeros_like(out))


def test_forward_shape_errors(mlp_model, gen):
    with pytest.raises(DimensionError):
        velocity_forward(mlp_model, randn(gen, 4, 2), randn(gen, 4, 2), 0.5)
    with pytest.raises(DimensionError):
        velocity_forward(mlp_model, randn(gen, 4, 3), randn(gen, 4, 3), 0.5)
    with pytest.raises(DimensionError):
        velocity_forward(mlp_model, randn(gen, 4, 3), randn(gen, 4, 2), torch.zeros(3, dtype=DTYPE))


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        as_tensor([float("inf")])
    assert as_tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)


def test_gradient_of_square():
    w = torch.tensor(3.0, dtype=DTYPE, requires_grad=True)
    g = gradients(w * w, {"w": w})
    assert float(g["w"]) == 6.0


def test_gradient_matches_finite_difference(gen):
    w = randn(gen, 4).requires_grad_(True)
    x, y = randn(gen, 6, 4), randn(gen, 6)

    def f(wv):
        r = x @ wv - y
        return (r * r).sum()

    g = gradients(f(w), {"w": w})["w"]
    h = 1e-5
    with torch.no_grad():
        for i in range(4):
            e = torch.zeros(4, dtype=DTYPE)
            e[i] = h
            fd = (f(w + e) - f(w - e)) / (2 * h)
            assert abs(float(g[i] - fd)) <= 1e-6 * max(abs(float(fd)), 1e-12)


def test_stop_gradient_semantics():
    w = torch.tensor([0.5, -2.0], dtype=DTYPE, requires_grad=True)
    loss = ((stop_gradient(w) - w) ** 2).sum()
    assert float(loss.detach()) == 0.0
    assert torch.equal(gradients(loss, {"w": w})["w"], torch.zeros(2, dtype=DTYPE))
    # a parameter only reachable through the stop-gradient receives exact zeros
    u = torch.tensor(1.5, dtype=DTYPE, requires_grad=True)
    loss2 = (stop_gradient(u) * w).sum()
    assert float(gradients(loss2, {"u": u})["u"]) == 0.0


def test_gradients_requires_scalar():
    w = torch.ones(3, dtype=DTYPE, requires_grad=True)
    with pytest.raises(UsageError):
        gradients(w * 2, {"w": w})


def test_frozen_model(mlp_model):
    from flowsr.optim import OptimizerState, adam_step, ema_update
    mlp_model.freeze()
    assert mlp_model.frozen
    zeros = {k: torch.zeros_like(v) for k, v in mlp_model.params.items()}
    with pytest.raises(FrozenModelError):
        adam_step(OptimizerState(), mlp_model, zeros)
    with pytest.raises(FrozenModelError):
        ema_update(mlp_model, 0.9)


def test_clone_is_independent(mlp_model):
    c = mlp_model.clone()
    with torch.no_grad():
        c.params["out.bias"].add_(1.0)
    assert not torch.equal(c.params["out.bias"], mlp_model.params["out.bias"])
