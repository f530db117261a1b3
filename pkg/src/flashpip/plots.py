"""Figure rendering for the report paths. File output only (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pip_losses(stage_reports: dict, path) -> None:
    """One panel per stage, the three alignment components plus the total."""
    n = len(stage_reports)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.2), squeeze=False)
    for ax, (label, reports) in zip(axes[0], stage_reports.items()):
        steps = range(len(reports))
        for key in ("loss_cum", "loss_final", "loss_hid", "total"):
            ax.plot(steps, [getattr(r, key) for r in reports],
                    lw=1.0, label=key.replace("loss_", ""))
        ax.set_title(label)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("loss")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_epe_stages(stage_rows, path) -> None:
    """Pruned vs truncated end-point error per stage."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = np.arange(len(stage_rows))
    pruned = [r["epe_pruned"] for r in stage_rows]
    trunc = [r["epe_truncated"] for r in stage_rows]
    ax.bar(xs - 0.18, trunc, width=0.36, label="truncated")
    ax.bar(xs + 0.18, pruned, width=0.36, label="pruned")
    ax.set_xticks(xs, [f"S={r['S']}" for r in stage_rows])
    ax.set_ylabel("held-out EPE (px)")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_reduction(rows, path) -> None:
    """Request/peak reduction versus resolution, one line per (sparsity, T)."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    combos = sorted({(r["sparsity"], r["T"]) for r in rows})
    for s, T in combos:
        sel = [r for r in rows if r["sparsity"] == s and r["T"] == T]
        sel.sort(key=lambda r: r["height"] * r["width"])
        labels = [f"{r['height']}x{r['width']}" for r in sel]
        axes[0].plot(labels, [r["reduction_req_pct"] for r in sel],
                     marker="o", label=f"s={s}, T={T}")
        axes[1].plot(labels, [r["reduction_peak_pct"] for r in sel], marker="o")
    axes[0].set_ylabel("request reduction (%)")
    axes[1].set_ylabel("peak-bytes reduction (%)")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.tick_params(axis="x", rotation=20)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trace_series(fraction_series, hit_series, path) -> None:
    """Mean updated fraction and hit ratio across iterations."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(range(1, len(fraction_series) + 1), fraction_series,
            marker="o", color="tab:red", label="updated fraction")
    ax.set_xlabel("iteration")
    ax.set_ylabel("updated fraction", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(range(2, len(hit_series) + 2), hit_series,
             marker="s", color="tab:blue", label="hit ratio")
    ax2.set_ylabel("hit ratio vs previous", color="tab:blue")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_scene_preview(sample, path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    panels = [("left", sample.left.data[0, 0], "gray"),
              ("right", sample.right.data[0, 0], "gray"),
              ("gt disparity", sample.gt_disparity.data[0, 0], "turbo")]
    for ax, (title, img, cmap) in zip(axes, panels):
        im = ax.imshow(img, cmap=cmap)
        ax.set_title(title)
        ax.axis("off")
        if cmap == "turbo":
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
