"""Velocity networks and the differentiable substrate they are trained through.

Tensors are float64 ``torch.Tensor`` objects; reverse-mode gradients come from
``torch.autograd``.  Parameters live in plain ordered dicts so that losses can be
evaluated under arbitrary parameter sets (EMA copies, finite-difference probes).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, FrozenModelError, UsageError

DTYPE = torch.float64

#: highest sinusoidal frequency of the time embedding (radians per unit time)
TIME_SCALE = 16.0
#: ratio between the highest and lowest embedding frequency
TIME_BASE = 1.0e4

ParamSet = Dict[str, torch.Tensor]
VelocityField = Callable[[torch.Tensor, torch.Tensor, Union[torch.Tensor, float]], torch.Tensor]


def as_tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    """Convert ``data`` to a float64 tensor, rejecting NaN/Inf entries."""
    x = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        x = x.reshape(tuple(shape))
    if not torch.isfinite(x).all():
        raise ValueError("tensor input contains NaN or Inf")
    return x


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


@dataclass(frozen=True)
class Arch:
    """Layer descriptor for a velocity network.

    ``kind="mlp"``: ``x_shape=(D,)``, cond is a length-``cond_channels`` vector.
    ``kind="conv"``: ``x_shape=(C, H, W)``, cond has ``cond_channels`` planes of
    the same spatial size.  The first layer is a stride-``patch`` convolution onto
    a patch grid, followed by 3x3 convolutions on that grid, and a stride-``patch``
    transposed convolution back to full resolution.  ``widths`` lists the channel
    count of the patch embedding and of each 3x3 layer.
    """

    kind: str
    x_shape: tuple[int, ...]
    cond_channels: int
    widths: tuple[int, ...]
    time_dim: int = 16
    patch: int = 4

    def __post_init__(self):
        object.__setattr__(self, "x_shape", tuple(int(s) for s in self.x_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("mlp", "conv"):
            raise ConfigError(f"unknown arch kind {self.kind!r}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if any(s <= 0 for s in self.x_shape):
            raise ConfigError(f"x_shape must be positive, got {self.x_shape}")
        if self.cond_channels < 0:
            raise ConfigError("cond_channels must be >= 0")
        if self.time_dim <= 0 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be a positive even integer, got {self.time_dim}")
        if self.kind == "mlp" and len(self.x_shape) != 1:
            raise ConfigError("mlp arch expects x_shape=(D,)")
        if self.kind == "conv":
            if len(self.x_shape) != 3:
                raise ConfigError("conv arch expects x_shape=(C, H, W)")
            if self.patch < 1 or self.x_shape[1] % self.patch or self.x_shape[2] % self.patch:
                raise ConfigError(f"spatial sides {self.x_shape[1:]} not divisible by patch {self.patch}")

    @property
    def cond_shape(self) -> tuple[int, ...]:
        if self.kind == "mlp":
            return (self.cond_channels,)
        return (self.cond_channels,) + self.x_shape[1:]

    def to_text(self) -> str:
        return "\n".join([
            f"arch.kind={self.kind}",
            "arch.x_shape=" + ",".join(map(str, self.x_shape)),
            f"arch.cond_channels={self.cond_channels}",
            "arch.widths=" + ",".join(map(str, self.widths)),
            f"arch.time_dim={self.time_dim}",
            f"arch.patch={self.patch}",
        ])

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "Arch":
        try:
            return cls(
                kind=kv["arch.kind"],
                x_shape=tuple(int(v) for v in kv["arch.x_shape"].split(",")),
                cond_channels=int(kv["arch.cond_channels"]),
                widths=tuple(int(v) for v in kv["arch.widths"].split(",")),
                time_dim=int(kv["arch.time_dim"]),
                patch=int(kv.get("arch.patch", 4)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing arch key {exc}") from None


def _layer_shapes(arch: Arch) -> list[tuple[str, tuple[int, ...]]]:
    d_t = arch.time_dim
    if arch.kind == "mlp":
        shapes = []
        fan = arch.x_shape[0] + arch.cond_channels + d_t
        for i, w in enumerate(arch.widths):
            shapes.append((f"l{i}", (w, fan)))
            fan = w + d_t
        shapes.append(("out", (arch.x_shape[0], fan)))
        return shapes
    c, p = arch.x_shape[0], arch.patch
    shapes = [("in", (arch.widths[0], (c + arch.cond_channels) * p * p + d_t, 1, 1))]
    for i in range(1, len(arch.widths)):
        shapes.append((f"c{i}", (arch.widths[i], arch.widths[i - 1] + d_t, 3, 3)))
    shapes.append(("out", (c * p * p, arch.widths[-1] + d_t, 1, 1)))
    return shapes


def _fan_in(shape: tuple[int, ...]) -> int:
    return math.prod(shape[1:])


class VelocityModel:
    """A velocity field v(x, cond, t) with trainable parameters and an EMA shadow."""

    def __init__(self, arch: Arch, params: ParamSet, ema: ParamSet | None = None):
        self.arch = arch
        self.params: ParamSet = OrderedDict(params)
        if ema is None:
            ema = OrderedDict((k, v.detach().clone()) for k, v in self.params.items())
        self.ema: ParamSet = OrderedDict(ema)
        self._frozen = False
        for p in self.params.values():
            p.requires_grad_(True)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "VelocityModel":
        self._frozen = True
        for p in self.params.values():
            p.requires_grad_(False)
        return self

    def check_mutable(self) -> None:
        if self._frozen:
            raise FrozenModelError("attempted to update a frozen model")

    def field(self, ema: bool = False, params: ParamSet | None = None) -> VelocityField:
        """Return ``v(x, cond, t)`` bound to the live, EMA, or explicit parameters."""
        chosen = params if params is not None else (self.ema if ema else self.params)

        def v(x, cond, t):
            return velocity_forward(self, x, cond, t, params=chosen)

        return v

    def clone(self) -> "VelocityModel":
        params = OrderedDict((k, v.detach().clone()) for k, v in self.params.items())
        ema = OrderedDict((k, v.detach().clone()) for k, v in self.ema.items())
        return VelocityModel(self.arch, params, ema)

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params.values())


def init_velocity_model(arch: Arch, seed: int) -> VelocityModel:
    """Initialise weights with a LeCun-normal scheme: N(0, 1/fan_in), zero biases.

    The same seed yields bit-identical parameters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for name, shape in _layer_shapes(arch):
        std = 1.0 / math.sqrt(_fan_in(shape))
        params[f"{name}.weight"] = torch.randn(shape, generator=gen, dtype=DTYPE) * std
        params[f"{name}.bias"] = torch.zeros(shape[0], dtype=DTYPE)
    return VelocityModel(arch, params)


def embedding_frequencies(d_t: int) -> torch.Tensor:
    half = d_t // 2
    k = torch.arange(half, dtype=DTYPE)
    return TIME_SCALE * TIME_BASE ** (-k / half)


def time_embedding(t, d_t: int) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(w_k t)..., cos(w_k t)...]`` of length ``d_t``.

    ``w_k = TIME_SCALE * TIME_BASE**(-(k-1)/(d_t/2))`` for ``k = 1..d_t/2``.
    A scalar ``t`` gives shape ``(d_t,)``; a vector of times gives ``(B, d_t)``.
    """
    if d_t <= 0 or d_t % 2:
        raise ConfigError(f"time embedding dimension must be positive and even, got {d_t}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("time must lie in [0, 1]")
    ang = t[..., None] * embedding_frequencies(d_t)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _batch_times(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        return t.expand(batch)
    if t.shape != (batch,):
        raise DimensionError(f"time tensor must be scalar or shape ({batch},), got {tuple(t.shape)}")
    return t


def velocity_forward(model: VelocityModel, x: torch.Tensor, cond: torch.Tensor, t,
                     params: ParamSet | None = None) -> torch.Tensor:
    """Evaluate the velocity for a batch ``x`` of shape ``(B, *arch.x_shape)``."""
    arch = model.arch
    p = model.params if params is None else params
    if x.ndim != len(arch.x_shape) + 1 or tuple(x.shape[1:]) != arch.x_shape:
        raise DimensionError(f"x has shape {tuple(x.shape)}, expected (B, {arch.x_shape})")
    batch = x.shape[0]
    if cond is None:
        cond = x.new_zeros((batch,) + arch.cond_shape)
    if tuple(cond.shape) != (batch,) + arch.cond_shape:
        raise DimensionError(f"cond has shape {tuple(cond.shape)}, expected {(batch,) + arch.cond_shape}")
    emb = time_embedding(_batch_times(t, batch), arch.time_dim)
    if arch.kind == "mlp":
        return _mlp_forward(arch, p, x, cond, emb)
    return _conv_forward(arch, p, x, cond, emb)


def _mlp_forward(arch, p, x, cond, emb):
    h = torch.cat([x, cond, emb], dim=1)
    for i in range(len(arch.widths)):
        h = F.silu(F.linear(h, p[f"l{i}.weight"], p[f"l{i}.bias"]))
        h = torch.cat([h, emb], dim=1)
    return F.linear(h, p["out.weight"], p["out.bias"])


def _with_emb(h, emb):
    b, _, hh, ww = h.shape
    return torch.cat([h, emb[:, :, None, None].expand(b, emb.shape[1], hh, ww)], dim=1)


def _conv_forward(arch, p, x, cond, emb):
    b, c, hh, ww = x.shape
    k = arch.patch
    # stride-k patch embedding == unfold into the patch grid + 1x1 conv
    h = F.pixel_unshuffle(torch.cat([x, cond], dim=1), k)
    h = F.silu(F.conv2d(_with_emb(h, emb), p["in.weight"], p["in.bias"]))
    for i in range(1, len(arch.widths)):
        h = F.silu(F.conv2d(_with_emb(h, emb), p[f"c{i}.weight"], p[f"c{i}.bias"], padding=1))
    out = F.conv2d(_with_emb(h, emb), p["out.weight"], p["out.bias"])
    return F.pixel_shuffle(out, k)


def gradients(loss: torch.Tensor, params: ParamSet) -> ParamSet:
    """Exact reverse-mode gradient of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters that do not influence the loss (including those only reachable
    through ``stop_gradient``) receive exact zeros.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise UsageError("gradients() needs a scalar loss")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return OrderedDict((n, torch.zeros_like(t)) for n, t in zip(names, tensors))
    live = [i for i, t in enumerate(tensors) if t.requires_grad]
    found = torch.autograd.grad(loss.reshape(()), [tensors[i] for i in live], allow_unused=True)
    grads = [None] * len(tensors)
    for i, g in zip(live, found):
        grads[i] = g
    return OrderedDict(
        (n, torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)
    )


def params_bytes(params: ParamSet) -> bytes:
    """Concatenated little-endian payloads; used for byte-identity checks."""
    return b"".join(p.detach().contiguous().numpy().astype("<f8").tobytes() for p in params.values())
