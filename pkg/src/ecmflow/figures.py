"""Matplotlib renderings saved next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_loss_curve(history, out_path) -> Path:
    """Loss-vs-step figure for a training run.

    ``history`` rows are (step, l_blend, l_refine, l_total).
    """
    steps = [r[0] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r[3] for r in history], label="total", lw=1.5)
    ax.plot(steps, [r[1] for r in history], label="blend", lw=1.0, alpha=0.7)
    ax.plot(steps, [r[2] for r in history], label="refine", lw=1.0, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss (sum)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_eval_summary(rows, out_path) -> Path:
    """Per-sample PSNR against the frame-average baseline, plus SSIM."""
    idx = [r["sample"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(idx, [r["psnr"] for r in rows], "o-", ms=3, label="model")
    if rows and "baseline_psnr" in rows[0]:
        ax1.plot(idx, [r["baseline_psnr"] for r in rows], "s--", ms=3,
                 alpha=0.6, label="frame average")
    ax1.set_xlabel("sample")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    ax2.plot(idx, [r["ssim"] for r in rows], "o-", ms=3, color="tab:green")
    ax2.set_xlabel("sample")
    ax2.set_ylabel("SSIM")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
