"""Phenotype assignment, balanced fold planning, and cross-validation pooling.

Fold planning generates stratified candidate partitions (phenotype counts
balanced by construction), scores each by a Kruskal-Wallis test on lesion
volumes plus across-fold volume variability, and picks the best candidate
by a fixed composite rule. Candidate i derives its shuffle from (seed, i),
so the search is reproducible and schedule-independent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .metrics import MetricRow, binarize, dice_score
from .stats import chi2_sf, kruskal_wallis
from .volume import BinaryMask, GridVolume, check_same_grid

__all__ = [
    "StudyRecord",
    "ArchetypeAtlas",
    "FoldPlan",
    "assign_phenotype",
    "balance_folds",
    "assign_controls",
    "fold_summary",
    "FOLD_SUMMARY_COLUMNS",
    "write_fold_summary",
    "aggregate_cv",
]


@dataclass
class StudyRecord:
    """One imaging study: identity, file references, and demographics."""

    id: str
    image_path: str = ""
    label_path: Optional[str] = None
    lesion_volume: int = 0
    age: float = 0.0
    sex: str = "unknown"
    phenotype: Optional[int] = None
    is_control: bool = False
    fold: Optional[int] = None

    def __post_init__(self):
        if self.lesion_volume < 0:
            raise ValueError(f"{self.id}: lesion volume must be >= 0")
        if self.sex not in ("F", "M", "unknown"):
            raise ValueError(f"{self.id}: sex must be F, M or unknown")
        if self.is_control and (self.label_path or self.phenotype is not None):
            raise ValueError(f"{self.id}: controls carry no label and no phenotype")

    def to_json(self) -> dict:
        out = {
            "id": self.id, "image_path": self.image_path, "volume": self.lesion_volume,
            "age": self.age, "sex": self.sex, "is_control": self.is_control,
        }
        if self.label_path is not None:
            out["label_path"] = self.label_path
        if self.phenotype is not None:
            out["phenotype"] = self.phenotype
        if self.fold is not None:
            out["fold"] = self.fold
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "StudyRecord":
        return cls(
            id=obj["id"], image_path=obj.get("image_path", ""),
            label_path=obj.get("label_path"), lesion_volume=int(obj.get("volume", 0)),
            age=float(obj.get("age", 0.0)), sex=obj.get("sex", "unknown"),
            phenotype=obj.get("phenotype"), is_control=bool(obj.get("is_control", False)),
            fold=obj.get("fold"),
        )


@dataclass
class ArchetypeAtlas:
    """K frequency maps on the analysis grid plus the mask threshold."""

    maps: list[GridVolume]
    threshold: float = 0.10

    def __post_init__(self):
        if not self.maps:
            raise ValueError("atlas needs at least one archetype map")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        check_same_grid(*self.maps)

    @property
    def k(self) -> int:
        return len(self.maps)

    def mask(self, index: int) -> BinaryMask:
        """Binary archetype mask: map voxels strictly above the threshold."""
        m = self.maps[index]
        return BinaryMask((m.data > self.threshold).astype(np.float64), m.spacing)


def assign_phenotype(mask: BinaryMask, atlas: ArchetypeAtlas, threshold: Optional[float] = None) -> Optional[int]:
    """Index of the archetype with the largest Dice against ``mask``.

    Returns None when every Dice is zero; ties go to the lowest index.
    """
    if threshold is not None and threshold != atlas.threshold:
        atlas = ArchetypeAtlas(maps=atlas.maps, threshold=threshold)
    scores = []
    for i in range(atlas.k):
        arch = atlas.mask(i)
        check_same_grid(mask, arch)
        # empty-vs-empty Dice of 1.0 must not claim membership
        if mask.data.sum() == 0 or arch.data.sum() == 0:
            scores.append(0.0)
        else:
            scores.append(dice_score(mask, arch))
    best = int(np.argmax(scores))
    return best if scores[best] > 0 else None


@dataclass
class FoldPlan:
    """A k-way partition of studies with balance diagnostics."""

    k: int
    seed: int
    n_perm: int
    assignment: dict[str, int]
    diagnostics: dict

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.assignment.items() if f == fold)

    def to_json(self) -> dict:
        return {
            "k": self.k, "seed": self.seed, "n_perm": self.n_perm,
            "assignments": [{"id": sid, "fold": f} for sid, f in sorted(self.assignment.items())],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldPlan":
        return cls(
            k=int(obj["k"]), seed=int(obj["seed"]), n_perm=int(obj["n_perm"]),
            assignment={a["id"]: int(a["fold"]) for a in obj["assignments"]},
            diagnostics=obj.get("diagnostics", {}),
        )


def _phenotype_classes(records: Sequence[StudyRecord]) -> list[np.ndarray]:
    """Record indices grouped by phenotype, in a fixed deterministic order."""
    by_pheno: dict = {}
    for i, rec in enumerate(records):
        by_pheno.setdefault(rec.phenotype, []).append(i)
    keys = sorted((k for k in by_pheno if k is not None)) + ([None] if None in by_pheno else [])
    return [np.asarray(by_pheno[k], dtype=np.intp) for k in keys]


def _candidate_assignment(classes: list[np.ndarray], n: int, k: int, seed: int, index: int) -> np.ndarray:
    """Stratified candidate partition ``index``: within each phenotype class the
    members are dealt round-robin starting from the least-loaded folds, which
    bounds both per-class counts and total fold sizes to differ by <= 1."""
    rng = np.random.default_rng([seed, index])
    assign = np.empty(n, dtype=np.intp)
    loads = np.zeros(k, dtype=np.intp)
    for members in classes:
        shuffled = members[rng.permutation(members.size)]
        fold_order = np.argsort(loads, kind="stable")
        folds = fold_order[np.arange(shuffled.size) % k]
        assign[shuffled] = folds
        loads += np.bincount(folds, minlength=k)
    return assign


def balance_folds(
    records: Sequence[StudyRecord], k: int = 5, n_perm: int = 50000, seed: int = 0,
) -> FoldPlan:
    """Search stratified permutations for the most volume-balanced fold plan.

    Candidates whose Kruskal-Wallis p on fold volume lists falls in the top
    1% of the pool are kept; among them the winner minimizes the sum of the
    across-fold variances of mean volume and of volume SD, each normalized
    by its pool median. Ties break to the lowest candidate index.
    """
    n = len(records)
    if n < k:
        raise ValueError(f"need at least {k} records, got {n}")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    volumes = np.asarray([r.lesion_volume for r in records], dtype=np.float64)
    classes = _phenotype_classes(records)

    from scipy.stats import rankdata

    ranks = rankdata(volumes)
    _, counts = np.unique(volumes, return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum())
    tie_denom = 1.0 - tie_term / (n ** 3 - n)

    h_stats = np.empty(n_perm)
    mean_vars = np.empty(n_perm)
    sd_vars = np.empty(n_perm)
    for i in range(n_perm):
        assign = _candidate_assignment(classes, n, k, seed, i)
        fold_n = np.bincount(assign, minlength=k).astype(np.float64)
        rank_sums = np.bincount(assign, weights=ranks, minlength=k)
        h = 12.0 / (n * (n + 1)) * float((rank_sums ** 2 / fold_n).sum()) - 3.0 * (n + 1)
        h_stats[i] = h / tie_denom if tie_denom > 0 else 0.0
        vol_sums = np.bincount(assign, weights=volumes, minlength=k)
        vol_sumsq = np.bincount(assign, weights=volumes ** 2, minlength=k)
        fold_means = vol_sums / fold_n
        with np.errstate(invalid="ignore"):
            fold_vars = np.maximum(vol_sumsq - fold_n * fold_means ** 2, 0.0) / np.maximum(fold_n - 1, 1)
        fold_sds = np.sqrt(fold_vars)
        mean_vars[i] = fold_means.var(ddof=1)
        sd_vars[i] = fold_sds.var(ddof=1)
    if tie_denom <= 0:
        p_values = np.ones(n_perm)
    else:
        p_values = np.array([chi2_sf(h, k - 1) for h in h_stats])

    cutoff = np.quantile(p_values, 0.99)
    top = np.flatnonzero(p_values >= cutoff)
    med_mean = float(np.median(mean_vars))
    med_sd = float(np.median(sd_vars))

    def norm(x, med):
        if med > 0:
            return x / med
        return 0.0 if x == 0 else np.inf

    composite = np.array([norm(mean_vars[i], med_mean) + norm(sd_vars[i], med_sd) for i in top])
    winner = int(top[int(np.argmin(composite))])

    assign = _candidate_assignment(classes, n, k, seed, winner)
    assignment = {records[i].id: int(assign[i]) for i in range(n)}
    pheno_counts = []
    for f in range(k):
        counts_f: dict = {}
        for i in np.flatnonzero(assign == f):
            key = "none" if records[i].phenotype is None else str(records[i].phenotype)
            counts_f[key] = counts_f.get(key, 0) + 1
        pheno_counts.append(dict(sorted(counts_f.items())))
    fold_vol = [volumes[assign == f] for f in range(k)]
    diagnostics = {
        "kw_h": float(h_stats[winner]),
        "kw_p": float(p_values[winner]),
        "selected_index": winner,
        "pool_p_median": float(np.median(p_values)),
        "pool_p_cutoff": float(cutoff),
        "n_top_candidates": int(top.size),
        "per_fold_phenotype_counts": pheno_counts,
        "per_fold_mean_volume": [float(v.mean()) for v in fold_vol],
        "per_fold_sd_volume": [float(v.std(ddof=1)) if v.size > 1 else 0.0 for v in fold_vol],
        "selection_rule": "kw-p top 1% pool, then min normalized mean/sd volume variance",
    }
    return FoldPlan(k=k, seed=seed, n_perm=n_perm, assignment=assignment, diagnostics=diagnostics)


def assign_controls(controls: Sequence[StudyRecord], k: int, seed: int) -> dict[str, int]:
    """Split controls across folds by count only (shuffled round-robin)."""
    rng = np.random.default_rng([seed, 0x0C])
    order = rng.permutation(len(controls))
    return {controls[int(i)].id: int(pos % k) for pos, i in enumerate(order)}


FOLD_SUMMARY_COLUMNS = [
    "fold", "Mean Patient Age", "SD Patient Age", "Proportion Female (F)",
    "SD Proportion Female", "Mean Label Size", "SD Label Size",
]


def fold_summary(plan: FoldPlan, records: Sequence[StudyRecord]) -> list[dict]:
    """Per-fold demographic and label-size summaries."""
    by_id = {r.id: r for r in records}
    missing = [sid for sid in plan.assignment if sid not in by_id]
    if missing:
        raise ValueError(f"assigned ids missing from records: {missing[:5]}")
    rows = []
    for f in range(plan.k):
        members = [by_id[sid] for sid in plan.fold_ids(f)]
        ages = np.array([m.age for m in members], dtype=np.float64)
        female = np.array([1.0 if m.sex == "F" else 0.0 for m in members])
        sizes = np.array([m.lesion_volume for m in members], dtype=np.float64)
        rows.append({
            "fold": f"fold_{f}",
            "Mean Patient Age": float(ages.mean()),
            "SD Patient Age": float(ages.std(ddof=1)) if ages.size > 1 else 0.0,
            "Proportion Female (F)": float(female.mean()),
            "SD Proportion Female": float(female.std(ddof=1)) if female.size > 1 else 0.0,
            "Mean Label Size": float(sizes.mean()),
            "SD Label Size": float(sizes.std(ddof=1)) if sizes.size > 1 else 0.0,
        })
    return rows


def write_fold_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=FOLD_SUMMARY_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


@dataclass(frozen=True)
class ModelCvSummary:
    model_id: str
    n: int
    mean_dice: float
    mean_hd95: Optional[float]
    hd95_excluded: int
    per_fold: dict


def aggregate_cv(rows: Sequence[MetricRow]) -> list[ModelCvSummary]:
    """Pool out-of-sample metric rows across folds, per model.

    The pooled mean is over all rows (not the mean of fold means); undefined
    HD95 rows are excluded from the HD mean with the count reported.
    """
    seen = set()
    for r in rows:
        key = (r.study_id, r.model_id)
        if key in seen:
            raise ValueError(f"duplicate (study, model) pair {key}")
        seen.add(key)
    out = []
    for model in sorted({r.model_id for r in rows}):
        mrows = [r for r in rows if r.model_id == model]
        dices = np.array([r.dice for r in mrows])
        hds = np.array([r.hd95 for r in mrows if r.hd95 is not None], dtype=np.float64)
        per_fold = {}
        for f in sorted({r.fold for r in mrows}):
            frows = [r for r in mrows if r.fold == f]
            fhds = [r.hd95 for r in frows if r.hd95 is not None]
            per_fold[f] = {
                "n": len(frows),
                "mean_dice": float(np.mean([r.dice for r in frows])),
                "mean_hd95": float(np.mean(fhds)) if fhds else None,
            }
        out.append(ModelCvSummary(
            model_id=model, n=len(mrows),
            mean_dice=float(dices.mean()),
            mean_hd95=float(hds.mean()) if hds.size else None,
            hd95_excluded=len(mrows) - hds.size,
            per_fold=per_fold,
        ))
    return out
