"""Figure rendering for the report path.

Every CLI report command drops PNG figures next to its CSV output: sweep
degradation curves, bootstrap false-positive distributions, embedding
scatter plots, fold balance diagnostics, and axial mosaic views of overlap
and t maps. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .volume import GridVolume

__all__ = [
    "render_sweep_curves",
    "render_bootstrap_hist",
    "render_embedding_scatter",
    "render_fold_volumes",
    "render_fold_summary_bars",
    "render_volume_mosaic",
    "render_cv_summary",
]

plt.rcParams.update({"figure.dpi": 110, "savefig.bbox": "tight", "font.size": 9})


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def render_sweep_curves(rows: list[dict], out_path) -> None:
    """Mean dice / HD95 / predicted volume against noise increment, one line
    per model, one panel row per noise kind."""
    kinds = sorted({r["noise"] for r in rows})
    models = sorted({r["model_id"] for r in rows})
    metrics = [("mean_dice", "mean Dice"), ("mean_hd95", "mean HD95 (voxels)"),
               ("mean_pred_volume", "mean predicted volume")]
    fig, axes = plt.subplots(len(kinds), 3, figsize=(11, 2.8 * len(kinds)), squeeze=False)
    for i, kind in enumerate(kinds):
        for j, (key, label) in enumerate(metrics):
            ax = axes[i][j]
            for model in models:
                pts = [(r["magnitude"], r[key]) for r in rows
                       if r["noise"] == kind and r["model_id"] == model and r[key] is not None]
                if pts:
                    xs, ys = zip(*sorted(pts))
                    ax.plot(xs, ys, marker="o", markersize=3, label=model)
            ax.set_xlabel(f"{kind} magnitude")
            ax.set_ylabel(label)
            if i == 0 and j == 0:
                ax.legend(fontsize=7)
    fig.suptitle("Model performance under increasing corruption")
    _save(fig, out_path)


def render_bootstrap_hist(bootstrap: dict[str, np.ndarray], out_path) -> None:
    """Bootstrap distributions of mean false-positive voxels per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for model in sorted(bootstrap):
        ax.hist(bootstrap[model], bins=60, alpha=0.55, label=model)
    ax.set_xlabel("bootstrap mean FP voxels per control")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.set_title("Bootstrap means of false-positive volume")
    _save(fig, out_path)


def render_embedding_scatter(
    gt: dict[str, np.ndarray],
    preds: dict[str, dict[str, np.ndarray]],
    scores: dict[str, float] | None,
    out_path,
) -> None:
    """Aligned embedding scatter: ground truth plus one panel per model,
    colored by the per-study score when available."""
    panels = [("ground truth", gt)] + sorted(preds.items())
    fig, axes = plt.subplots(1, len(panels), figsize=(3.6 * len(panels), 3.6), squeeze=False)
    for ax, (name, coords) in zip(axes[0], panels):
        ids = sorted(coords)
        xy = np.array([coords[i] for i in ids])
        c = np.array([scores.get(i, np.nan) for i in ids]) if scores else None
        sc = ax.scatter(xy[:, 0], xy[:, 1], s=10, c=c, cmap="viridis")
        if scores:
            fig.colorbar(sc, ax=ax, shrink=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("dim 1")
        ax.set_ylabel("dim 2")
    _save(fig, out_path)


def render_fold_volumes(volumes_by_fold: dict[int, list[float]], out_path) -> None:
    """Lesion volume distribution per fold as box plots."""
    folds = sorted(volumes_by_fold)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([volumes_by_fold[f] for f in folds], tick_labels=[f"fold_{f}" for f in folds])
    ax.set_ylabel("lesion volume (voxels)")
    ax.set_title("Fold balance: lesion volumes")
    _save(fig, out_path)


def render_fold_summary_bars(summary_rows: list[dict], out_path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    folds = [r["fold"] for r in summary_rows]
    panels = [
        ("Mean Patient Age", "SD Patient Age", "age (years)"),
        ("Proportion Female (F)", "SD Proportion Female", "proportion female"),
        ("Mean Label Size", "SD Label Size", "label size (voxels)"),
    ]
    for ax, (mean_key, sd_key, label) in zip(axes, panels):
        ax.bar(folds, [r[mean_key] for r in summary_rows],
               yerr=[r[sd_key] for r in summary_rows], capsize=3)
        ax.set_ylabel(label)
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle("Per-fold demographics and label sizes")
    _save(fig, out_path)


def render_volume_mosaic(v: GridVolume, out_path, title: str = "", symmetric: bool = False) -> None:
    """Axial mosaic through a volume (overlap maps, t maps, corrected p)."""
    nz = v.dims[2]
    picks = np.unique(np.linspace(0, nz - 1, min(12, nz)).astype(int))
    ncol = 4
    nrow = int(np.ceil(len(picks) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.2 * ncol, 2.2 * nrow), squeeze=False)
    peak = np.abs(v.data).max() or 1.0
    kwargs = {"cmap": "coolwarm", "vmin": -peak, "vmax": peak} if symmetric else {"cmap": "magma"}
    for ax, z in zip(axes.ravel(), picks):
        ax.imshow(v.data[:, :, z].T, origin="lower", **kwargs)
        ax.set_title(f"z={z}", fontsize=7)
    for ax in axes.ravel():
        ax.axis("off")
    if title:
        fig.suptitle(title)
    _save(fig, out_path)


def render_cv_summary(summaries, out_path) -> None:
    """Pooled and per-fold mean Dice / HD95 per model."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for summary in summaries:
        folds = sorted(summary.per_fold)
        axes[0].plot(folds, [summary.per_fold[f]["mean_dice"] for f in folds],
                     marker="o", label=summary.model_id)
        hd = [summary.per_fold[f]["mean_hd95"] for f in folds]
        axes[1].plot(folds, [h if h is not None else np.nan for h in hd],
                     marker="o", label=summary.model_id)
    axes[0].set_xlabel("fold")
    axes[0].set_ylabel("mean Dice")
    axes[1].set_xlabel("fold")
    axes[1].set_ylabel("mean HD95 (voxels)")
    axes[0].legend(fontsize=8)
    fig.suptitle("Cross-validation performance per fold")
    _save(fig, out_path)
