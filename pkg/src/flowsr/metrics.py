"""Fidelity and realism metrics on images in [-1, 1]."""

from __future__ import annotations

import math

import torch

from .errors import DimensionError

PROXY_SCALES = 3


def _to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


def mse01(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean squared error on the [0, 1] scale."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    d = _to_unit(x) - _to_unit(y)
    return float((d * d).mean())


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """PSNR in dB with both inputs clipped to [-1, 1] and mapped to [0, 1].

    Identical inputs give ``math.inf``.
    """
    m = mse01(x, y)
    return math.inf if m == 0 else -10.0 * math.log10(m)


def psnr_raw(x: torch.Tensor, y: torch.Tensor) -> float:
    """-10 log10(MSE) in the data's own units, without clipping (point data)."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    m = float(((x - y) ** 2).mean())
    return math.inf if m == 0 else -10.0 * math.log10(m)


def _grad_mag(img: torch.Tensor) -> torch.Tensor:
    # forward differences, zero at the far border
    dx = torch.zeros_like(img)
    dy = torch.zeros_like(img)
    dx[..., :, :-1] = img[..., :, 1:] - img[..., :, :-1]
    dy[..., :-1, :] = img[..., 1:, :] - img[..., :-1, :]
    return torch.sqrt(dx * dx + dy * dy)


def _halve(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    img = img[..., : h - h % 2, : w - w % 2]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def perceptual_proxy(x: torch.Tensor, y: torch.Tensor) -> float:
    """Multi-scale gradient-structure distance, a desk-scale stand-in for LPIPS.

    Sums, over three dyadic scales obtained by 2x2 block means, the mean squared
    difference between the gradient-magnitude maps of ``x`` and ``y``.  Inputs
    are images ``(..., H, W)`` in [-1, 1]; the result is averaged over any
    leading axes.
    """
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim < 2 or x.shape[-1] < 4 or x.shape[-2] < 4:
        raise DimensionError(f"perceptual proxy needs images of at least 4x4, got {tuple(x.shape)}")
    a, b = _to_unit(x), _to_unit(y)
    total = 0.0
    for level in range(PROXY_SCALES):
        if level:
            a, b = _halve(a), _halve(b)
        d = _grad_mag(a) - _grad_mag(b)
        total += float((d * d).mean())
    return total


def relative_mse(x: torch.Tensor, ref: torch.Tensor, origin: torch.Tensor) -> float:
    """||x - ref||^2 / ||ref - origin||^2: error relative to the distance travelled."""
    num = float(((x - ref) ** 2).sum())
    den = float(((ref - origin) ** 2).sum())
    return num / den
