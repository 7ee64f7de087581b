import pytest
import torch
from hypothesis import settings

from flowsr.model import DTYPE, Arch, init_velocity_model

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def mlp_arch():
    return Arch("mlp", (3,), 2, (8, 8), time_dim=4)


@pytest.fixture
def conv_arch():
    return Arch("conv", (1, 8, 8), 1, (4, 4), time_dim=4, patch=2)


@pytest.fixture
def mlp_model(mlp_arch):
    return init_velocity_model(mlp_arch, 7)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def randn(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=DTYPE)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
