"""The t-sweep over one-step estimates, and its CSV / image-strip reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import UsageError
from .flow import SRTask
from .metrics import mse01, perceptual_proxy, psnr, psnr_raw
from .solvers import SolverSpec, estimate_final, solve

CSV_HEADER = ("t", "psnr_mean", "psnr_std", "proxy_mean", "proxy_std", "n")
MODES = ("student", "teacher")


@dataclass
class SweepRow:
    t: float
    psnr_mean: float
    psnr_std: float
    proxy_mean: float
    proxy_std: float
    n: int


@dataclass
class SweepResult:
    rows: list
    model_id: str = field(default="", compare=False)
    dataset_id: str = field(default="", compare=False)

    def row(self, t: float) -> SweepRow:
        for r in self.rows:
            if math.isclose(r.t, t, abs_tol=1e-12):
                return r
        raise KeyError(t)

    @property
    def ts(self) -> list:
        return [r.t for r in self.rows]


def sweep_estimates(v, mode: str, task: SRTask, data: torch.Tensor, t_grid, seed: int,
                    solver: SolverSpec | None = None):
    """One-step endpoint estimates for every t in ``t_grid``.

    ``student`` mode evaluates x0 + v(x0, t) once per t.  ``teacher`` mode
    integrates the ODE from 0 up to each t and applies x_t + (1 - t) v(x_t, t);
    the state at t = 1 is the ODE endpoint itself.

    Returns ``(estimates: dict t -> tensor, x1, x0, cond)``.
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    ts = sorted(float(t) for t in t_grid)
    if not ts:
        raise UsageError("empty t grid")
    if data.shape[0] == 0:
        raise UsageError("empty dataset")
    if ts[0] < 0 or ts[-1] > 1:
        raise UsageError("t grid must lie in [0, 1]")
    gen = torch.Generator().manual_seed(int(seed))
    x0, x1, cond = task.couple(data, gen)
    out = {}
    with torch.no_grad():
        if mode == "student":
            for t in ts:
                out[t] = x0 + v(x0, cond, t)
            return out, x1, x0, cond
        solver = solver or SolverSpec("rk45", tol=1e-3)
        x, t_cur = x0, 0.0
        for t in ts:
            if t > t_cur:
                x, _ = solve(v, x, cond, solver, t_cur, t)
                t_cur = t
            out[t] = x if t == 1.0 else estimate_final(x, t, v(x, cond, t))
    return out, x1, x0, cond


def _summary(vals: list) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=float)
    if np.isinf(arr).any():
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(estimates: dict, x1: torch.Tensor, model_id: str = "", dataset_id: str = "") -> SweepResult:
    """Per-t metric means and sample stds.  Images use clipped PSNR and the proxy;
    point data (rank-1 items) use unclipped PSNR in data units and a NaN proxy."""
    rows = []
    images = x1.ndim >= 3
    metric = psnr if images else psnr_raw
    for t in sorted(estimates):
        est = estimates[t]
        ps = [metric(est[i], x1[i]) for i in range(x1.shape[0])]
        if images:
            pr = [perceptual_proxy(est[i], x1[i]) for i in range(x1.shape[0])]
        else:
            pr = [float("nan")] * x1.shape[0]
        pm, psd = _summary(ps)
        qm, qsd = _summary(pr)
        rows.append(SweepRow(t, pm, psd, qm, qsd, int(x1.shape[0])))
    return SweepResult(rows, model_id, dataset_id)


def mse_curve(estimates: dict, x1: torch.Tensor) -> dict:
    """Raw per-element MSE for each t (images: on the [0, 1] scale)."""
    if x1.ndim >= 3:
        return {t: mse01(est, x1) for t, est in sorted(estimates.items())}
    return {t: float(((est - x1) ** 2).mean()) for t, est in sorted(estimates.items())}


def tradeoff_sweep(v, mode: str, task: SRTask, data: torch.Tensor, t_grid, seed: int = 0,
                   solver: SolverSpec | None = None, model_id: str = "", dataset_id: str = "") -> SweepResult:
    est, x1, _, _ = sweep_estimates(v, mode, task, data, t_grid, seed, solver)
    return summarize(est, x1, model_id, dataset_id)


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".17g")


def emit_report(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in result.rows:
            w.writerow([_fmt(r.t), _fmt(r.psnr_mean), _fmt(r.psnr_std), _fmt(r.proxy_mean),
                        _fmt(r.proxy_std), _fmt(r.n)])


def read_report(path) -> SweepResult:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected sweep header {header}")
        rows = [SweepRow(float(a), float(b), float(c), float(d), float(e), int(n)) for a, b, c, d, e, n in rd]
    return SweepResult(rows)


def _to_u8(img: torch.Tensor) -> np.ndarray:
    arr = ((img.detach().clamp(-1, 1).numpy() + 1.0) * 127.5).round()
    return arr.astype(np.uint8)


def write_pnm(path, img: torch.Tensor) -> None:
    """Binary PGM for ``(H, W)`` / ``(1, H, W)`` or PPM for ``(3, H, W)`` images in [-1, 1]."""
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        h, w = img.shape
        payload, magic = _to_u8(img).tobytes(), b"P5"
    elif img.ndim == 3 and img.shape[0] == 3:
        h, w = img.shape[1:]
        payload, magic = _to_u8(img).transpose(1, 2, 0).tobytes(), b"P6"
    else:
        raise ValueError(f"cannot write image of shape {tuple(img.shape)}")
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + payload)


def image_strip(lr: torch.Tensor, estimates: list, gt: torch.Tensor, gap: int = 2) -> torch.Tensor:
    """Horizontal strip (LR | estimates... | GT) for one image ``(C, H, W)``."""
    tiles = [lr] + list(estimates) + [gt]
    c, h, _ = gt.shape
    sep = torch.ones((c, h, gap), dtype=gt.dtype)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(tile)
    return torch.cat(parts, dim=-1)
