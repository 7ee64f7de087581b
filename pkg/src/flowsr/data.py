"""Synthetic datasets: a 2-D Gaussian mixture and procedural tiny textures."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .container import load_tensors, save_tensors
from .errors import ConfigError, DimensionError
from .model import DTYPE

KINDS = ("toy2d-gmm", "tiny-textures")


@dataclass
class DatasetSpec:
    kind: str = "tiny-textures"
    count: int = 256
    side: int = 32
    channels: int = 1
    components: int = 8
    radius: float = 2.0
    component_std: float = 0.15
    blobs: int = 3
    min_cycles: int = 3
    max_cycles: int = 6
    scale: int = 0  # SR scale recorded with the data; 0 picks 4 (textures) or 2 (toy2d)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.scale == 0:
            self.scale = 2 if self.kind == "toy2d-gmm" else 4
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if self.kind == "toy2d-gmm" and 2 % self.scale:
            raise DimensionError(f"toy2d points have 2 coordinates; scale {self.scale} does not divide 2")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.kind == "toy2d-gmm" and self.components < 1:
            raise ConfigError(f"mixture needs >= 1 component, got {self.components}")
        if self.kind == "tiny-textures":
            if self.side % self.scale:
                raise DimensionError(f"side {self.side} not divisible by scale {self.scale}")
            if not 1 <= self.min_cycles <= self.max_cycles:
                raise ConfigError("need 1 <= min_cycles <= max_cycles")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gmm_means(components: int, radius: float) -> torch.Tensor:
    ang = 2 * math.pi * torch.arange(components, dtype=DTYPE) / components
    return radius * torch.stack([torch.cos(ang), torch.sin(ang)], dim=1)


def toy2d_points(count: int, gen: torch.Generator, components: int = 8, radius: float = 2.0,
                 std: float = 0.15) -> torch.Tensor:
    """Equal-weight mixture of isotropic Gaussians centred on a circle."""
    if components < 1:
        raise ConfigError(f"mixture needs >= 1 component, got {components}")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    comp = torch.randint(components, (count,), generator=gen)
    noise = torch.randn((count, 2), generator=gen, dtype=DTYPE)
    return gmm_means(components, radius)[comp] + std * noise


def texture_images(count: int, gen: torch.Generator, side: int = 32, channels: int = 1, blobs: int = 3,
                   min_cycles: int = 3, max_cycles: int = 6):
    """Blobs plus one sinusoid per image, clipped to [-1, 1].

    Each blob is an anisotropic Gaussian bump with random centre, widths in
    [1.5, 6] px, orientation and signed amplitude in +-[0.3, 0.8].  The sinusoid
    has an integer number of cycles per image along each axis (so it sits on an
    FFT bin), total frequency in [min_cycles, max_cycles] cycles per image,
    amplitude in [0.25, 0.5] and random phase.

    Returns ``(images, freqs)`` with ``images`` of shape ``(count, channels, side, side)``
    and ``freqs`` the integer ``(ky, kx)`` of each image's sinusoid.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    coords = torch.arange(side, dtype=DTYPE)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    candidates = [(ky, kx) for ky in range(-max_cycles, max_cycles + 1) for kx in range(0, max_cycles + 1)
                  if (kx > 0 or ky > 0) and min_cycles <= math.hypot(ky, kx) <= max_cycles]
    imgs = torch.zeros((count, channels, side, side), dtype=DTYPE)
    freqs = torch.zeros((count, 2), dtype=torch.int64)
    for n in range(count):
        img = torch.zeros((side, side), dtype=DTYPE)
        for _ in range(blobs):
            u = torch.rand(6, generator=gen, dtype=DTYPE)
            cy, cx = u[0] * side, u[1] * side
            sy, sx = 1.5 + 4.5 * u[2], 1.5 + 4.5 * u[3]
            th = math.pi * u[4]
            amp = (0.3 + 0.5 * u[5]) * (1 if torch.rand(1, generator=gen) < 0.5 else -1)
            dy, dx = yy - cy, xx - cx
            a = torch.cos(th) * dx + torch.sin(th) * dy
            b = -torch.sin(th) * dx + torch.cos(th) * dy
            img += amp * torch.exp(-0.5 * ((a / sx) ** 2 + (b / sy) ** 2))
        ky, kx = candidates[int(torch.randint(len(candidates), (1,), generator=gen))]
        u = torch.rand(2, generator=gen, dtype=DTYPE)
        amp, phase = 0.25 + 0.25 * u[0], 2 * math.pi * u[1]
        img += amp * torch.sin(2 * math.pi * (ky * yy + kx * xx) / side + phase)
        imgs[n] = img.clamp(-1.0, 1.0)
        freqs[n] = torch.tensor([ky, kx])
    return imgs, freqs


def generate(spec: DatasetSpec) -> torch.Tensor:
    gen = torch.Generator().manual_seed(spec.seed)
    if spec.kind == "toy2d-gmm":
        return toy2d_points(spec.count, gen, spec.components, spec.radius, spec.component_std)
    imgs, _ = texture_images(spec.count, gen, spec.side, spec.channels, spec.blobs,
                             spec.min_cycles, spec.max_cycles)
    return imgs


def write_dataset(spec: DatasetSpec, path, seed: int | None = None) -> bytes:
    """Generate ``spec`` (optionally with a new seed) into a container file; returns its bytes."""
    if seed is not None:
        spec = DatasetSpec(**{**spec.to_dict(), "seed": seed})
    return save_tensors(path, {"x1": generate(spec)}, spec.to_dict())


def gen_toy2d(spec: DatasetSpec, path, seed: int | None = None) -> bytes:
    if spec.kind != "toy2d-gmm":
        raise ConfigError(f"gen_toy2d needs kind toy2d-gmm, got {spec.kind!r}")
    return write_dataset(spec, path, seed)


def gen_tiny_textures(spec: DatasetSpec, path, seed: int | None = None) -> bytes:
    if spec.kind != "tiny-textures":
        raise ConfigError(f"gen_tiny_textures needs kind tiny-textures, got {spec.kind!r}")
    return write_dataset(spec, path, seed)


def load_dataset(path):
    meta, tensors = load_tensors(path)
    if "x1" not in tensors:
        raise ConfigError(f"{path} holds no 'x1' tensor")
    return meta, tensors["x1"]
