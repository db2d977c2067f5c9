"""Matplotlib figures for the report path. Everything renders off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .datagen import SPLITS
from .report import HEATMAP_CMAP, HEATMAP_EPS

RC = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.linestyle": ":",
    "grid.alpha": 0.6,
    "figure.dpi": 100,
}
SPLIT_COLORS = {"frequent": "#1b9e77", "common": "#7570b3", "rare": "#d95f02"}


def _save(fig, path, meta: dict | None) -> Path:
    path = Path(path)
    # drop the version string so output bytes only depend on the data and meta
    info = {"Software": None}
    if meta:
        info["Description"] = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
    fig.savefig(path, format="png", metadata=info)
    plt.close(fig)
    return path


def confusion_png(m, path, meta: dict | None = None, title: str = "") -> Path:
    """Log2-scaled heat map of a confusion matrix, same palette as the SVG export."""
    m = np.asarray(m, dtype=np.float64)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        img = ax.imshow(np.log2(np.maximum(m, HEATMAP_EPS)), cmap=HEATMAP_CMAP,
                        vmin=np.log2(HEATMAP_EPS), vmax=0.0, interpolation="nearest")
        ax.grid(False)
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        if title:
            ax.set_title(title)
        fig.colorbar(img, ax=ax, label="log2 entry")
        fig.tight_layout()
        return _save(fig, path, meta)


def split_bars(reports: dict, path, meta: dict | None = None, title: str = "") -> Path:
    """Grouped bars of split accuracy, one group per named report."""
    names = list(reports)
    x = np.arange(len(names))
    width = 0.8 / len(SPLITS)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(names) + 1.5), 2.8))
        for k, split in enumerate(SPLITS):
            vals = [reports[n].split_acc(split) for n in names]
            vals = [np.nan if v is None else v for v in vals]
            ax.bar(x + (k - 1) * width, vals, width, label=split, color=SPLIT_COLORS[split], linewidth=0)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("accuracy")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path, meta)


def _split_lines(ax, xs, reports):
    for split in SPLITS:
        ys = [r.split_acc(split) for r in reports]
        ys = [np.nan if v is None else v for v in ys]
        ax.plot(xs, ys, marker="o", ms=3, color=SPLIT_COLORS[split], label=split)


def sweep_plot(param: str, values, reports, path, meta: dict | None = None) -> Path:
    """Split accuracy and PwB against a swept parameter."""
    with plt.rc_context(RC):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(6.0, 2.6))
        xs = np.arange(len(values))
        _split_lines(ax, xs, reports)
        bx.plot(xs, [r.pwb for r in reports], marker="s", ms=3, color="k")
        for a in (ax, bx):
            a.set_xticks(xs)
            a.set_xticklabels([str(v) for v in values])
            a.set_xlabel(param)
        ax.set_ylabel("accuracy")
        bx.set_ylabel("PwB")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, meta)


def step_plot(reports, path, meta: dict | None = None) -> Path:
    """Split accuracy of every recurrent step's prediction."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        steps = np.arange(1, len(reports) + 1)
        _split_lines(ax, steps, reports)
        ax.set_xticks(steps)
        ax.set_xlabel("step")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, meta)


def training_curves(log: list[dict], path, meta: dict | None = None) -> Path:
    """Loss, learning rate and (when logged) split accuracy per epoch."""
    epochs = [row["epoch"] for row in log]
    with plt.rc_context(RC):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(6.0, 2.6))
        ax.plot(epochs, [row["loss"] for row in log], color="k", label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        lr_ax = ax.twinx()
        lr_ax.plot(epochs, [row["lr"] for row in log], color="0.6", ls="--")
        lr_ax.set_ylabel("lr")
        lr_ax.grid(False)
        for split in SPLITS:
            key = f"acc_{split}"
            pts = [(row["epoch"], row[key]) for row in log if row.get(key) is not None]
            if pts:
                bx.plot(*zip(*pts), color=SPLIT_COLORS[split], label=split)
        bx.set_xlabel("epoch")
        bx.set_ylabel("val accuracy")
        if bx.lines:
            bx.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, meta)
