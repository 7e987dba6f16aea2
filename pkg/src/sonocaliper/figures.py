"""Matplotlib renderings written next to the delimited outputs.

Every function saves a PNG to the given path and returns that path; the Agg
backend is forced so the CLI works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AblationTable, EvaluationReport
from .geometry import CaliperPoint, PlaneConfig

__all__ = [
    "BIOMETRY_COLORS",
    "save_training_curves",
    "save_error_bars",
    "save_ablation_chart",
    "save_augmentation_grid",
    "save_prediction_overlay",
]

BIOMETRY_COLORS = {
    "TCD": "#d62728",  # red
    "CMS": "#2ca02c",  # green
    "NFT": "#ffbf00",  # yellow
    "AW": "#17becf",
}
_FALLBACK_COLOR = "#9467bd"


def _history_rows(history) -> list[dict]:
    rows = []
    for item in history:
        if isinstance(item, dict):
            rows.append(item)
        else:
            rows.append(item.to_json_dict())
    return rows


def save_training_curves(history, path: str | Path) -> Path:
    """Loss curves on the left axis, validation decode error on the right."""
    rows = _history_rows(history)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r["train_loss"] for r in rows], label="train loss", color="#1f77b4")
    ax.plot(epochs, [r["val_loss"] for r in rows], label="val loss", color="#ff7f0e")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(
        epochs,
        [r["val_error_px"] for r in rows],
        label="val decode error [px]",
        color="#2ca02c",
        linestyle="--",
    )
    ax2.set_ylabel("val decode error [px]")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_error_bars(report: EvaluationReport, path: str | Path) -> Path:
    """Pooled MAE per caliper and per biometry, with sd whiskers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    calipers = list(report.per_caliper_mae_mm)
    biometries = list(report.per_biometry_mae_mm)
    fig, (ax1, ax2) = plt.subplots(
        1, 2, figsize=(9, 4), gridspec_kw={"width_ratios": [max(len(calipers), 1), max(len(biometries), 1)]}
    )
    stats = [report.per_caliper_mae_mm[c].pooled for c in calipers]
    colors = [BIOMETRY_COLORS.get(c.rsplit("_", 1)[0], _FALLBACK_COLOR) for c in calipers]
    ax1.bar(
        range(len(calipers)),
        [s.mean for s in stats],
        yerr=[s.sd for s in stats],
        color=colors,
        capsize=3,
    )
    ax1.set_xticks(range(len(calipers)))
    ax1.set_xticklabels(calipers, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("MAE [mm]")
    ax1.set_title("per caliper (pooled)")
    stats = [report.per_biometry_mae_mm[b].pooled for b in biometries]
    ax2.bar(
        range(len(biometries)),
        [s.mean for s in stats],
        yerr=[s.sd for s in stats],
        color=[BIOMETRY_COLORS.get(b, _FALLBACK_COLOR) for b in biometries],
        capsize=3,
    )
    ax2.set_xticks(range(len(biometries)))
    ax2.set_xticklabels(biometries, fontsize=8)
    ax2.set_title("per biometry (pooled)")
    fig.suptitle(f"plane {report.plane_name}, {report.n_images} images")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_ablation_chart(table: AblationTable, path: str | Path) -> Path:
    """Grouped bars: one group per column, one bar per run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(table.columns)
    labels = [label for label, _ in table.rows]
    n_runs = len(labels)
    x = np.arange(len(columns), dtype=np.float64)
    width = 0.8 / max(n_runs, 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(columns) + 2, 4))
    for i, (label, cells) in enumerate(table.rows):
        means = [cells[c].mean for c in columns]
        sds = [cells[c].sd for c in columns]
        ax.bar(x + (i - (n_runs - 1) / 2) * width, means, width, yerr=sds, capsize=2, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(columns, fontsize=8)
    ax.set_ylabel("pooled MAE [mm]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_augmentation_grid(
    panels: Sequence[tuple[str, np.ndarray]], path: str | Path, ncols: int = 4
) -> Path:
    """The effect panels (baseline plus one per effect) as one tiled figure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(panels)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3 * ncols, 2.2 * nrows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes[n:]:
        ax.axis("off")
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0 if img.dtype.kind == "f" else 255)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_prediction_overlay(
    image: np.ndarray,
    plane: PlaneConfig,
    points: Mapping[str, CaliperPoint],
    path: str | Path,
    ground_truth: Mapping[str, CaliperPoint] | None = None,
    title: str | None = None,
) -> Path:
    """Image with '+' markers per caliper and a line per biometry pair.

    Ground-truth positions, when given, appear as thin white circles.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    vmax = 1.0 if np.asarray(image).dtype.kind == "f" else 255
    ax.imshow(image, cmap="gray", vmin=0, vmax=vmax)
    for name, (a, b) in zip(plane.biometry_names, plane.biometry_pairs):
        color = BIOMETRY_COLORS.get(name, _FALLBACK_COLOR)
        if a in points and b in points:
            ax.plot(
                [points[a].x, points[b].x],
                [points[a].y, points[b].y],
                color=color,
                linewidth=0.8,
                alpha=0.7,
            )
        for lm in (a, b):
            if lm in points:
                ax.plot(points[lm].x, points[lm].y, marker="+", markersize=10, color=color)
    if ground_truth:
        for p in ground_truth.values():
            ax.plot(p.x, p.y, marker="o", markersize=6, markerfacecolor="none",
                    markeredgecolor="white", markeredgewidth=0.6)
    if title:
        ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
