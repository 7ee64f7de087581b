"""Block-mean downsampling H, its exact transpose, and the replication lift.

Images are tensors whose trailing ``spatial_dims`` axes are spatial: ``(..., H, W)``
for images and ``(..., D)`` for 1-D signals such as the 2-D toy points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DimensionError
from .model import DTYPE


@dataclass(frozen=True)
class DegradationSpec:
    scale: int = 4
    sigma_n: float = 0.0
    kernel: str = "block-mean"
    spatial_dims: int = 2

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if not math.isfinite(self.sigma_n) or self.sigma_n < 0:
            raise ConfigError(f"sigma_n must be finite and >= 0, got {self.sigma_n}")
        if self.kernel != "block-mean":
            raise ConfigError(f"unsupported kernel {self.kernel!r}")
        if self.spatial_dims not in (1, 2):
            raise ConfigError("spatial_dims must be 1 or 2")


def _split_shape(x: torch.Tensor, spec: DegradationSpec):
    if x.ndim < spec.spatial_dims:
        raise DimensionError(f"tensor of rank {x.ndim} has no {spec.spatial_dims} spatial axes")
    return tuple(x.shape[:-spec.spatial_dims]), tuple(x.shape[-spec.spatial_dims:])


def downsample(x: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    """Each LR pixel is the mean of its s x s (or length-s) HR block."""
    lead, sides = _split_shape(x, spec)
    s = spec.scale
    if any(n % s for n in sides):
        raise DimensionError(f"spatial sides {sides} not divisible by scale {s}")
    if spec.spatial_dims == 1:
        return x.reshape(lead + (sides[0] // s, s)).mean(dim=-1)
    h, w = sides
    return x.reshape(lead + (h // s, s, w // s, s)).mean(dim=(-3, -1))


def _replicate(y: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    s = spec.scale
    out = y.repeat_interleave(s, dim=-1)
    if spec.spatial_dims == 2:
        out = out.repeat_interleave(s, dim=-2)
    return out


def transpose_upsample(y: torch.Tensor, spec: DegradationSpec, hr_sides=None) -> torch.Tensor:
    """Exact adjoint of :func:`downsample`: spreads ``y / s**k`` over each block."""
    _, sides = _split_shape(y, spec)
    if hr_sides is not None and tuple(n * spec.scale for n in sides) != tuple(hr_sides):
        raise DimensionError(f"LR sides {sides} inconsistent with HR sides {tuple(hr_sides)}")
    return _replicate(y, spec) / spec.scale ** spec.spatial_dims


def lift(y: torch.Tensor, spec: DegradationSpec, hr_sides=None) -> torch.Tensor:
    """Pseudo-inverse back-projection ``s**k * H^T``: nearest-neighbour replication."""
    _, sides = _split_shape(y, spec)
    if hr_sides is not None and tuple(n * spec.scale for n in sides) != tuple(hr_sides):
        raise DimensionError(f"LR sides {sides} inconsistent with HR sides {tuple(hr_sides)}")
    return _replicate(y, spec)


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def build_lr_condition(x1: torch.Tensor, spec: DegradationSpec, seed) -> torch.Tensor:
    """HR-resolution condition ``lift(H(x1) + n)`` with ``n ~ N(0, sigma_n^2 I)``.

    ``seed`` is an int or a caller-owned ``torch.Generator``.
    """
    y = downsample(x1, spec)
    if spec.sigma_n > 0:
        noise = torch.randn(y.shape, generator=_generator(seed), dtype=DTYPE)
        y = y + spec.sigma_n * noise
    return lift(y, spec)
