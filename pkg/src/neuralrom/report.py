"""Report rendering: delimited outputs with matplotlib figures alongside."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_loss_curve(metrics: list[dict], png_path) -> None:
    """Loss and learning-rate curves for one training run."""
    epochs = [m["epoch"] for m in metrics]
    losses = [m["loss"] for m in metrics]
    lrs = [m["lr"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.semilogy(epochs, losses, color="tab:blue", lw=1.2, label="mean epoch loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.semilogy(epochs, lrs, color="tab:orange", lw=1.0, ls="--", label="learning rate")
    ax2.set_ylabel("learning rate")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)


def write_bench_report(rows: dict, csv_path, png_path) -> None:
    """Timing table as CSV plus a per-step cost bar chart.

    ``rows`` carries full/reduced per-step means (ms), the speedup, and the
    one-time cubature costs.
    """
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in rows.items():
            writer.writerow([key, value])

    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    ax.bar(
        ["full step", "reduced step"],
        [rows["full_step_ms"], rows["reduced_step_ms"]],
        color=["tab:gray", "tab:green"],
    )
    ax.set_ylabel("mean time per step (ms)")
    ax.set_title(f"speedup {rows['speedup']:.1f}x")
    for i, v in enumerate([rows["full_step_ms"], rows["reduced_step_ms"]]):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)

    ax2.bar(
        ["cubature\nselection", "basis cache\nfill"],
        [rows["cubature_selection_ms"], rows["basis_cache_fill_ms"]],
        color=["tab:blue", "tab:orange"],
    )
    ax2.set_ylabel("one-time cost (ms)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
