"""Matplotlib figures written next to the CSV reports (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(results: dict, path, title: str = "") -> None:
    """PSNR and proxy against t for one or more labelled sweeps, plus the frontier."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for label, res in results.items():
        ts = res.ts
        psnr = [r.psnr_mean for r in res.rows]
        proxy = [r.proxy_mean for r in res.rows]
        axes[0].errorbar(ts, psnr, yerr=[r.psnr_std for r in res.rows], marker="o", capsize=3, label=label)
        axes[1].errorbar(ts, proxy, yerr=[r.proxy_std for r in res.rows], marker="o", capsize=3, label=label)
        axes[2].plot(proxy, psnr, marker="o", label=label)
        for t, x, y in zip(ts, proxy, psnr):
            axes[2].annotate(f"{t:g}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
    axes[0].set(xlabel="t", ylabel="PSNR (dB)")
    axes[1].set(xlabel="t", ylabel="proxy distance")
    axes[2].set(xlabel="proxy distance", ylabel="PSNR (dB)")
    for ax in axes:
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_trace(trace, path, columns=None, title: str = "") -> None:
    cols = columns or [c for c in trace.columns if c not in ("iteration", "lr", "wall_ms")]
    it = trace.column("iteration")
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for c in cols:
        vals = trace.column(c)
        if any(v > 0 for v in vals):
            ax.plot(it, vals, label=c, lw=0.8)
    ax.set_yscale("log")
    ax.set(xlabel="iteration", ylabel="loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_points(samples: dict, path, title: str = "") -> None:
    """Scatter of 2-D point clouds, one panel per label."""
    fig, axes = plt.subplots(1, len(samples), figsize=(3.4 * len(samples), 3.4), squeeze=False)
    for ax, (label, pts) in zip(axes[0], samples.items()):
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.5)
        ax.set_title(label, fontsize=9)
        ax.set_aspect("equal")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

