"""Fidelity metrics, training losses, and the joint early-stopping rule.

All functions here are evaluation-side: they score probability maps and
binary masks, they do not compute gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .volume import BinaryMask, GridVolume, ProbabilityMap, check_same_grid

__all__ = [
    "MetricParams",
    "MetricRow",
    "dice_score",
    "soft_dice_loss",
    "focal_loss",
    "hd95",
    "thresholded_average_loss",
    "combined_loss",
    "binarize",
    "early_stop",
    "fp_voxel_count",
    "surface_voxels",
    "write_metric_rows",
    "read_metric_rows",
    "METRIC_ROW_COLUMNS",
]

PROB_CLAMP = 1e-7  # probabilities clamped to [delta, 1-delta] before logs


@dataclass(frozen=True)
class MetricParams:
    """Shared metric and loss parameters.

    gamma: focal focusing exponent; epsilon: soft-Dice smoothing; theta:
    binarization threshold; tau: thresholded-average threshold; ta_weight:
    control-penalty weight in the combined loss; patience: early-stop epochs.
    """

    gamma: float = 2.0
    epsilon: float = 1e-5
    theta: float = 0.5
    tau: float = 0.5
    ta_weight: float = 1.0
    patience: int = 150

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0 < self.theta < 1 and 0 < self.tau < 1):
            raise ValueError("theta and tau must lie in (0, 1)")
        if self.ta_weight < 0:
            raise ValueError("ta_weight must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


METRIC_ROW_COLUMNS = [
    "study_id", "model_id", "fold", "condition",
    "dice", "hd95", "pred_volume", "label_volume", "fp_voxels",
]


@dataclass(frozen=True)
class MetricRow:
    """One (study, model, condition) evaluation result."""

    study_id: str
    model_id: str
    fold: int
    condition: str
    dice: float
    hd95: Optional[float]  # None when undefined (an empty mask)
    pred_volume: int
    label_volume: int
    fp_voxels: int

    def to_csv_fields(self) -> list[str]:
        return [
            self.study_id, self.model_id, str(self.fold), self.condition,
            repr(float(self.dice)),
            "" if self.hd95 is None else repr(float(self.hd95)),
            str(self.pred_volume), str(self.label_volume), str(self.fp_voxels),
        ]


def write_metric_rows(rows: Sequence[MetricRow], path) -> None:
    rows = sorted(rows, key=lambda r: (r.study_id, r.model_id, r.condition))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_ROW_COLUMNS)
        for r in rows:
            w.writerow(r.to_csv_fields())


def read_metric_rows(path) -> list[MetricRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(MetricRow(
                study_id=rec["study_id"], model_id=rec["model_id"],
                fold=int(rec["fold"]), condition=rec["condition"],
                dice=float(rec["dice"]),
                hd95=float(rec["hd95"]) if rec["hd95"] != "" else None,
                pred_volume=int(rec["pred_volume"]),
                label_volume=int(rec["label_volume"]),
                fp_voxels=int(rec["fp_voxels"]),
            ))
    return out


def dice_score(a: BinaryMask, b: BinaryMask) -> float:
    """2|A n B| / (|A| + |B|). Both empty -> 1.0, exactly one empty -> 0.0."""
    check_same_grid(a, b)
    na = float(a.data.sum())
    nb = float(b.data.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = float((a.data * b.data).sum())
    return 2.0 * inter / (na + nb)


def soft_dice_loss(p: ProbabilityMap, g: BinaryMask, params: MetricParams = MetricParams()) -> float:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    check_same_grid(p, g)
    eps = params.epsilon
    inter = float((p.data * g.data).sum())
    return 1.0 - (2.0 * inter + eps) / (float(p.data.sum()) + float(g.data.sum()) + eps)


def focal_loss(p: ProbabilityMap, g: BinaryMask, params: MetricParams = MetricParams()) -> float:
    """Mean of -[g*(1-p)^gamma*ln p + (1-g)*p^gamma*ln(1-p)] over voxels."""
    check_same_grid(p, g)
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    gd = g.data
    gamma = params.gamma
    pos = gd * (1.0 - pc) ** gamma * np.log(pc)
    neg = (1.0 - gd) * pc ** gamma * np.log(1.0 - pc)
    return float(-(pos + neg).mean())


def surface_voxels(mask: BinaryMask) -> np.ndarray:
    """Surface = mask voxels with at least one of 6 face-neighbors outside.

    The volume boundary counts as outside. Returns an (n, 3) array of voxel
    indices.
    """
    m = mask.data.astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    surface = m & ~interior
    return np.argwhere(surface)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q, method="linear"))


def hd95(a: BinaryMask, b: BinaryMask, q: float = 95.0, use_spacing: bool = False) -> Optional[float]:
    """Symmetric 95th-percentile surface distance, in voxels.

    max(P95 of d(A->B), P95 of d(B->A)) with linear-interpolation
    percentiles, where the directed distances run from each surface voxel of
    one mask to the nearest surface voxel of the other. Returns None when
    either mask is empty (the distance is undefined). With ``use_spacing``
    the coordinates are scaled to mm first.
    """
    check_same_grid(a, b)
    if a.data.sum() == 0 or b.data.sum() == 0:
        return None
    sa = surface_voxels(a).astype(np.float64)
    sb = surface_voxels(b).astype(np.float64)
    if use_spacing:
        sa = sa * np.asarray(a.spacing)
        sb = sb * np.asarray(b.spacing)
    d_ab = cKDTree(sb).query(sa, k=1)[0]
    d_ba = cKDTree(sa).query(sb, k=1)[0]
    return max(_percentile_linear(d_ab, q), _percentile_linear(d_ba, q))


def thresholded_average_loss(p: ProbabilityMap, params: MetricParams = MetricParams()) -> float:
    """Mean of voxel probabilities strictly above tau; 0 when none exceed it.

    On a correctly rejected control the value is exactly 0; with false
    positives it lands in (tau, 1].
    """
    supra = p.data[p.data > params.tau]
    if supra.size == 0:
        return 0.0
    return float(supra.mean())


def combined_loss(
    p: ProbabilityMap,
    g: Optional[BinaryMask],
    is_control: bool,
    params: MetricParams = MetricParams(),
) -> float:
    """Dice+Focal loss on lesion studies; Focal-vs-empty plus the weighted
    thresholded-average penalty on controls (soft Dice is undefined there).
    """
    if is_control:
        empty = BinaryMask(np.zeros(p.dims), p.spacing)
        return focal_loss(p, empty, params) + params.ta_weight * thresholded_average_loss(p, params)
    if g is None:
        raise ValueError("lesion study requires a ground-truth mask")
    return soft_dice_loss(p, g, params) + focal_loss(p, g, params)


def binarize(p: ProbabilityMap, theta: float = 0.5) -> BinaryMask:
    """Voxel = 1 iff p > theta (a value exactly at theta maps to 0)."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    return BinaryMask((p.data > theta).astype(np.float64), p.spacing)


def fp_voxel_count(p: ProbabilityMap, theta: float = 0.5) -> int:
    """Number of suprathreshold voxels in a control prediction."""
    return int(binarize(p, theta).data.sum())


def early_stop(
    trace: Sequence[tuple[float, float]],
    params: MetricParams = MetricParams(),
) -> tuple[Optional[int], int]:
    """Joint Dice/HD early-stopping decision over a metric trace.

    A joint improvement at epoch e means dice[e] beats the best dice so far
    and hd[e] beats (is below) the best hd so far; epoch 0 counts. Training
    stops at the first epoch more than ``patience`` epochs past the last
    joint improvement (stop_epoch None if the trace ends first). The best
    epoch is the argmax of dice between the last joint improvement and
    ``patience`` epochs beyond it, earliest epoch on ties.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    patience = params.patience
    best_dice = -np.inf
    best_hd = np.inf
    last_joint = 0
    stop_epoch: Optional[int] = None
    for e, (d, h) in enumerate(trace):
        if e - last_joint > patience:
            stop_epoch = e
            break
        if d > best_dice and h < best_hd:
            last_joint = e
        best_dice = max(best_dice, d)
        best_hd = min(best_hd, h)
    window_end = min(last_joint + patience, len(trace) - 1)
    window = [trace[e][0] for e in range(last_joint, window_end + 1)]
    best_epoch = last_joint + int(np.argmax(window))
    return stop_epoch, best_epoch
