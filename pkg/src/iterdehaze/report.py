"""Metric tables and their figures.

Every report path writes machine-readable delimited output (CSV) plus a
plain-text aligned table, and renders a matplotlib figure next to them.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_table(base_path, columns: list[str], rows: list[dict]):
    """Write <base>.csv and an aligned <base>.txt; returns both paths."""
    base = str(base_path)
    if base.endswith(".csv") or base.endswith(".txt"):
        base = base[:-4]
    csv_path = base + ".csv"
    txt_path = base + ".txt"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) if rows else len(c) for c in columns}
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("  ".join(c.ljust(widths[c]) for c in columns).rstrip() + "\n")
        for row in rows:
            fh.write("  ".join(str(row.get(c, "")).ljust(widths[c]) for c in columns).rstrip() + "\n")
    return csv_path, txt_path


def render_metric_bars(png_path, labels: list[str], series: dict[str, list[float]], title: str):
    """Grouped bars, one group per label, one bar color per metric series."""
    fig, ax = plt.subplots(figsize=(max(6.0, 0.45 * len(labels) + 2), 4.0))
    x = np.arange(len(labels))
    n = len(series)
    width = 0.8 / max(n, 1)
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + (i - (n - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45 if max(len(l) for l in labels) > 6 else 0, ha="right")
    ax.set_title(title)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def render_loss_curves(png_path, histories: dict[str, tuple[list[float], list[float]]]):
    """Per-stage train/validation curves; histories maps label -> (train, val)."""
    fig, axes = plt.subplots(1, len(histories), figsize=(5 * len(histories), 3.6), squeeze=False)
    for ax, (label, (train, val)) in zip(axes[0], histories.items()):
        if train:
            ax.plot(np.linspace(0, len(val) if val else 1, len(train)), train, lw=0.7, alpha=0.7, label="train")
        if val:
            ax.plot(np.arange(1, len(val) + 1), val, "o-", ms=3, label="validation")
        ax.set_title(label)
        ax.set_xlabel("iteration")
        ax.set_yscale("log")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def render_trace_montage(png_path, hazy: np.ndarray, steps: list[dict]):
    """Contact sheet of the iterative refinement: rows = A', T', dehazed."""
    cols = len(steps) + 1
    fig, axes = plt.subplots(3, cols, figsize=(1.7 * cols, 5.4))
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].set_title("input")
    axes[2, 0].imshow(hazy)
    axes[0, 0].set_ylabel("A'")
    axes[1, 0].set_ylabel("T'")
    axes[2, 0].set_ylabel("image")
    axes[0, 0].axis("off")
    axes[1, 0].axis("off")
    for col, step in enumerate(steps, start=1):
        axes[0, col].set_title(f"t={step['step']}")
        axes[0, col].imshow(np.ones((8, 8, 3)) * step["atmo"][None, None, :])
        axes[1, col].imshow(step["trans"], cmap="gray", vmin=0, vmax=1)
        axes[2, col].imshow(step["image"])
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
