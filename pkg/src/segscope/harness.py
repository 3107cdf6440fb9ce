"""Experiment orchestration: external-segmenter invocation, cross-validation
scoring, false-positive reports on controls, and noise-calibration sweeps.

Segmentation models are black boxes behind a SegmenterHandle: the builtin
reference thresholder, an external command invoked through NIfTI files on
disk, or a directory of precomputed probability maps. Every sweep cell is
keyed by (study, increment, model) with corruption seeds independent of the
model, so reports over multiple models are strictly paired.
"""

from __future__ import annotations

import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import stats
from .corruption import NoiseSchedule, derive_seed, apply_combined
from .folds import FoldPlan, ModelCvSummary, StudyRecord, aggregate_cv
from .metrics import MetricParams, MetricRow, binarize, dice_score, fp_voxel_count, hd95
from .nifti import read_volume, write_volume
from .stats import ZeroVarianceError, paired_t
from .volume import BinaryMask, GridVolume, ProbabilityMap, check_same_grid, normalize_intensity

__all__ = [
    "SegmenterError",
    "BuiltinSegmenter",
    "ExternalSegmenter",
    "PredictionDirectory",
    "run_segmenter",
    "StudyVolumes",
    "study_images",
    "study_labels",
    "cv_evaluate",
    "FpReport",
    "fp_report",
    "SweepReport",
    "noise_sweep",
    "pairwise_tests",
    "FP_MEASURE_ORDER",
]


class SegmenterError(RuntimeError):
    """A segmenter failed or produced an unusable probability map."""


@dataclass(frozen=True)
class BuiltinSegmenter:
    """Reference thresholder: p = clamp((normalized_intensity - threshold) / softness).

    An optional handicap raises the threshold inside a composed mask, which
    degrades the model only where that mask is set.
    """

    threshold: float = 0.5
    softness: float = 0.2
    handicap_mask: Optional[BinaryMask] = None
    handicap_threshold: Optional[float] = None

    def __post_init__(self):
        if self.softness <= 0:
            raise ValueError("softness must be > 0")
        if (self.handicap_mask is None) != (self.handicap_threshold is None):
            raise ValueError("handicap mask and threshold come together")


@dataclass(frozen=True)
class ExternalSegmenter:
    """Command template with {input} and {output} placeholders, run through
    the shell with NIfTI hand-off on disk."""

    command: str
    timeout: float = 300.0
    workdir: Optional[str] = None

    def __post_init__(self):
        for ph in ("{input}", "{output}"):
            if self.command.count(ph) != 1:
                raise ValueError(f"command must contain {ph} exactly once")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass(frozen=True)
class PredictionDirectory:
    """Precomputed probability maps, one NIfTI per study id."""

    path: str
    pattern: str = "{id}.nii.gz"


SegmenterHandle = BuiltinSegmenter | ExternalSegmenter | PredictionDirectory


def _run_builtin(handle: BuiltinSegmenter, image: GridVolume) -> ProbabilityMap:
    norm = normalize_intensity(image).data
    if handle.handicap_mask is None:
        theta = handle.threshold
    else:
        check_same_grid(handle.handicap_mask, image)
        theta = np.where(handle.handicap_mask.data > 0, handle.handicap_threshold, handle.threshold)
    p = np.clip((norm - theta) / handle.softness, 0.0, 1.0)
    return ProbabilityMap(p, image.spacing)


def _run_external(handle: ExternalSegmenter, image: GridVolume, study_id: str) -> ProbabilityMap:
    with tempfile.TemporaryDirectory(prefix="segscope_") as tmp:
        in_path = Path(tmp) / "input.nii.gz"
        out_path = Path(tmp) / "output.nii.gz"
        write_volume(image, in_path, "float32")
        cmd = handle.command.replace("{input}", str(in_path)).replace("{output}", str(out_path))
        try:
            proc = subprocess.run(
                cmd, shell=True, cwd=handle.workdir, timeout=handle.timeout,
                capture_output=True, text=True,
            )
        except subprocess.TimeoutExpired as exc:
            raise SegmenterError(f"{study_id}: segmenter timed out after {handle.timeout}s") from exc
        if proc.returncode != 0:
            raise SegmenterError(
                f"{study_id}: segmenter exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        if not out_path.exists():
            raise SegmenterError(f"{study_id}: segmenter wrote no output file")
        out, _ = read_volume(out_path)
    if out.dims != image.dims:
        raise SegmenterError(f"{study_id}: output grid {out.dims} != input grid {image.dims}")
    if out.data.min() < 0.0 or out.data.max() > 1.0:
        raise SegmenterError(f"{study_id}: output values outside [0, 1]")
    return ProbabilityMap(out.data, image.spacing)


def _run_directory(handle: PredictionDirectory, image: GridVolume, study_id: str) -> ProbabilityMap:
    path = Path(handle.path) / handle.pattern.format(id=study_id)
    if not path.exists():
        raise SegmenterError(f"{study_id}: missing prediction file {path}")
    out, _ = read_volume(path)
    if out.dims != image.dims:
        raise SegmenterError(f"{study_id}: prediction grid {out.dims} != image grid {image.dims}")
    if out.data.min() < 0.0 or out.data.max() > 1.0:
        raise SegmenterError(f"{study_id}: prediction values outside [0, 1]")
    return ProbabilityMap(out.data, image.spacing)


def run_segmenter(handle: SegmenterHandle, image: GridVolume, study_id: str = "") -> ProbabilityMap:
    """Produce a probability map for one image from any handle kind."""
    if isinstance(handle, BuiltinSegmenter):
        return _run_builtin(handle, image)
    if isinstance(handle, ExternalSegmenter):
        return _run_external(handle, image, study_id)
    if isinstance(handle, PredictionDirectory):
        return _run_directory(handle, image, study_id)
    raise TypeError(f"unknown segmenter handle {type(handle)!r}")


class StudyVolumes:
    """Lazy mapping from study id to volumes read from the record's paths."""

    def __init__(self, records: Sequence[StudyRecord], kind: str = "image"):
        self._by_id = {r.id: r for r in records}
        self._kind = kind

    def __getitem__(self, study_id: str):
        rec = self._by_id[study_id]
        if self._kind == "image":
            return read_volume(rec.image_path)[0]
        if rec.label_path is None:
            return None
        vol, _ = read_volume(rec.label_path)
        return BinaryMask((vol.data > 0.5).astype(np.float64), vol.spacing)

    def __contains__(self, study_id: str) -> bool:
        return study_id in self._by_id


def study_images(records: Sequence[StudyRecord]) -> StudyVolumes:
    return StudyVolumes(records, kind="image")


def study_labels(records: Sequence[StudyRecord]) -> StudyVolumes:
    return StudyVolumes(records, kind="label")


def _score_prediction(
    study: StudyRecord, fold: int, model_id: str, condition: str,
    prediction: ProbabilityMap, label: Optional[BinaryMask], params: MetricParams,
) -> MetricRow:
    pred_mask = binarize(prediction, params.theta)
    if label is None:
        label = BinaryMask(np.zeros(prediction.dims), prediction.spacing)
    d = dice_score(pred_mask, label)
    h = hd95(pred_mask, label)
    fp = int((pred_mask.data * (1.0 - label.data)).sum())
    return MetricRow(
        study_id=study.id, model_id=model_id, fold=fold, condition=condition,
        dice=d, hd95=h,
        pred_volume=int(pred_mask.data.sum()),
        label_volume=int(label.data.sum()),
        fp_voxels=fp,
    )


def cv_evaluate(
    plan: FoldPlan,
    studies: Sequence[StudyRecord],
    images: Mapping,
    labels: Mapping,
    models: dict[str, SegmenterHandle],
    params: MetricParams = MetricParams(),
    workers: int = 1,
) -> tuple[list[MetricRow], list[ModelCvSummary]]:
    """Score every (study, model) pair and pool across folds.

    The caller asserts that each study's prediction comes from the model
    instance that held it out; the rows record the fold for provenance.
    """
    in_plan = [s for s in studies if s.id in plan.assignment]
    missing = [s.id for s in studies if s.id not in plan.assignment and not s.is_control]
    if missing:
        raise ValueError(f"studies missing from fold plan: {missing[:5]}")

    def one(args):
        study, model_id = args
        image = normalize_intensity(images[study.id])
        pred = run_segmenter(models[model_id], image, study.id)
        return _score_prediction(
            study, plan.assignment[study.id], model_id, "baseline",
            pred, labels[study.id], params,
        )

    tasks = [(s, m) for s in in_plan for m in sorted(models)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, tasks))
    else:
        rows = [one(t) for t in tasks]
    rows.sort(key=lambda r: (r.study_id, r.model_id))
    return rows, aggregate_cv(rows)


FP_MEASURE_ORDER = [
    "Mean", "Mean (non-zero)", "Standard deviation", "Standard deviation (non-zero)",
    "Number of images with >= 1", "Maximum in one image",
]


@dataclass
class FpReport:
    model_ids: list[str]
    control_ids: list[str]
    counts: dict[str, list[int]]
    descriptives: dict[str, "stats.Descriptives"]
    bootstrap: dict[str, np.ndarray]
    tests: list[dict]

    def table(self) -> list[dict]:
        """Table-1-style rows: one per measure, one column per model."""
        rows = []
        for measure in FP_MEASURE_ORDER:
            row = {"measure": measure}
            for m in self.model_ids:
                d = self.descriptives[m]
                value = {
                    "Mean": d.mean,
                    "Mean (non-zero)": d.nonzero_mean,
                    "Standard deviation": d.sd,
                    "Standard deviation (non-zero)": d.nonzero_sd,
                    "Number of images with >= 1": d.count_nonzero,
                    "Maximum in one image": d.max,
                }[measure]
                row[m] = value
            rows.append(row)
        return rows


def fp_report(
    controls: Sequence[StudyRecord],
    models: dict[str, SegmenterHandle],
    images: Mapping,
    theta: float = 0.5,
    n_boot: int = 10000,
    size: int = 100,
    seed: int = 0,
    workers: int = 1,
) -> FpReport:
    """False-positive voxel counts per control per model, with Table-style
    descriptives, shared-seed bootstrap means, and pairwise paired t-tests.

    The bootstrap seed is shared across models, so subsample i draws the
    identical control indices for every model and the paired design is
    exact.
    """
    if not controls:
        raise ValueError("need at least one control")
    control_ids = sorted(c.id for c in controls)
    by_id = {c.id: c for c in controls}
    model_ids = sorted(models)

    def one(args):
        cid, model_id = args
        image = normalize_intensity(images[cid])
        try:
            pred = run_segmenter(models[model_id], image, cid)
        except SegmenterError as exc:
            raise SegmenterError(f"control {cid}, model {model_id}: {exc}") from exc
        return (cid, model_id, fp_voxel_count(pred, theta))

    tasks = [(cid, m) for cid in control_ids for m in model_ids]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    count_map = {(cid, m): c for cid, m, c in results}
    counts = {m: [count_map[(cid, m)] for cid in control_ids] for m in model_ids}

    descriptives = {m: stats.descriptive(counts[m]) for m in model_ids}
    bootstrap = {
        m: stats.bootstrap_means(counts[m], n_boot=n_boot, size=size, seed=seed)
        for m in model_ids
    }
    tests = []
    for i, ma in enumerate(model_ids):
        for mb in model_ids[i + 1:]:
            entry = {"model_a": ma, "model_b": mb}
            try:
                res = paired_t(bootstrap[ma], bootstrap[mb])
                entry.update(t=res.statistic, df=res.df, p=res.p_value, note="")
            except ZeroVarianceError:
                entry.update(t=None, df=None, p=None, note="indistinguishable")
            tests.append(entry)
    return FpReport(
        model_ids=model_ids, control_ids=control_ids, counts=counts,
        descriptives=descriptives, bootstrap=bootstrap, tests=tests,
    )


@dataclass
class SweepReport:
    """Noise-sweep aggregates, inter-model tests, and per-cell rows."""

    rows: list[dict]          # per (noise, increment, model) aggregate
    tests: list[dict]         # per (noise, metric, pair) with FDR/FWER columns
    cell_rows: list[MetricRow]
    gaps: list[dict]
    seed: int = 0


SWEEP_METRICS = ("dice", "hd95", "volume")


def _cell_metric(row: MetricRow, metric: str) -> Optional[float]:
    if metric == "dice":
        return row.dice
    if metric == "hd95":
        return row.hd95
    return float(row.pred_volume)


def pairwise_tests(
    cells: dict, model_ids: list[str], kinds: list[str], increments: dict,
    per_image: bool = False,
) -> list[dict]:
    """Paired t-tests per (noise, metric, model pair), then BH-FDR and Holm
    FWER corrections across the whole family.

    Default pairing is over per-increment mean vectors; ``per_image`` pairs
    every (study, increment) cell instead. Cells where HD95 is undefined for
    either model of a pair are excluded pairwise, with counts reported.
    """
    tests = []
    for kind in kinds:
        for metric in SWEEP_METRICS:
            for i, ma in enumerate(model_ids):
                for mb in model_ids[i + 1:]:
                    xs, ys = [], []
                    excluded = 0
                    for step in increments[kind]:
                        pair_a, pair_b = [], []
                        for sid in sorted({k[0] for k in cells if k[2] == kind and k[3] == step}):
                            ra = cells.get((sid, ma, kind, step))
                            rb = cells.get((sid, mb, kind, step))
                            if ra is None or rb is None:
                                continue
                            va = _cell_metric(ra, metric)
                            vb = _cell_metric(rb, metric)
                            if va is None or vb is None:
                                excluded += 1
                                continue
                            pair_a.append(va)
                            pair_b.append(vb)
                        if per_image:
                            xs.extend(pair_a)
                            ys.extend(pair_b)
                        elif pair_a:
                            xs.append(float(np.mean(pair_a)))
                            ys.append(float(np.mean(pair_b)))
                    entry = {
                        "noise": kind, "metric": metric, "model_a": ma, "model_b": mb,
                        "n_pairs": len(xs), "hd95_excluded": excluded,
                    }
                    try:
                        res = paired_t(xs, ys)
                        entry.update(t=res.statistic, df=res.df, p=res.p_value, note="")
                    except (ZeroVarianceError, ValueError):
                        entry.update(t=None, df=None, p=None, note="indistinguishable")
                    tests.append(entry)
    testable = [t for t in tests if t["p"] is not None]
    if testable:
        pvals = [t["p"] for t in testable]
        fdr = stats.bh_fdr(pvals)
        fwer = stats.holm_fwer(pvals)
        for t, pf, rf, pw, rw in zip(testable, fdr.adjusted, fdr.reject, fwer.adjusted, fwer.reject):
            t["p_fdr"] = float(pf)
            t["significant_fdr"] = bool(rf)
            t["p_fwer"] = float(pw)
            t["significant_fwer"] = bool(rw)
    for t in tests:
        t.setdefault("p_fdr", None)
        t.setdefault("significant_fdr", False)
        t.setdefault("p_fwer", None)
        t.setdefault("significant_fwer", False)
    return tests


def noise_sweep(
    studies: Sequence[StudyRecord],
    models: dict[str, SegmenterHandle],
    schedules: Sequence[NoiseSchedule],
    images: Mapping,
    labels: Mapping,
    seed: int = 0,
    params: MetricParams = MetricParams(),
    workers: int = 1,
    per_image_tests: bool = False,
) -> SweepReport:
    """Score every model over every (study, noise increment) cell.

    Each cell corrupts the image with a seed derived from (sweep seed, study
    id, noise kind, increment) - never the model - then re-normalizes the
    intensity and runs the segmenter, scoring against the uncorrupted label.
    A failed cell is dropped for all models to keep the design paired.
    """
    lesions = [s for s in studies if not s.is_control]
    model_ids = sorted(models)
    kinds = [sch.kind for sch in schedules]
    increments = {sch.kind: list(range(sch.n_steps)) for sch in schedules}

    def one_cell(args):
        study, sch, step = args
        image = images[study.id]
        specs = sch.specs_at(step, derive_seed(seed, study.id, sch.kind, str(step)))
        corrupted = normalize_intensity(apply_combined(image, specs))
        out = []
        for model_id in model_ids:
            try:
                pred = run_segmenter(models[model_id], corrupted, study.id)
            except SegmenterError as exc:
                return ("gap", study.id, sch.kind, step, model_id, str(exc))
            out.append(_score_prediction(
                study, study.fold if study.fold is not None else -1, model_id,
                f"{sch.kind}:{step}", pred, labels[study.id], params,
            ))
        return ("ok", study.id, sch.kind, step, out)

    tasks = [(s, sch, step) for sch in schedules for step in range(sch.n_steps) for s in lesions]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_cell, tasks))
    else:
        results = [one_cell(t) for t in tasks]

    cells: dict = {}
    gaps = []
    for res in results:
        if res[0] == "gap":
            _, sid, kind, step, model_id, message = res
            gaps.append({"study_id": sid, "noise": kind, "increment": step,
                         "model_id": model_id, "error": message})
            continue
        _, sid, kind, step, rows = res
        for row in rows:
            cells[(sid, row.model_id, kind, step)] = row

    agg_rows = []
    for sch in schedules:
        for step in range(sch.n_steps):
            for model_id in model_ids:
                keyed = [cells[k] for k in sorted(cells)
                         if k[1] == model_id and k[2] == sch.kind and k[3] == step]
                if not keyed:
                    continue
                hds = [r.hd95 for r in keyed if r.hd95 is not None]
                agg_rows.append({
                    "noise": sch.kind,
                    "increment": step,
                    "magnitude": sch.magnitudes[step],
                    "model_id": model_id,
                    "n": len(keyed),
                    "mean_dice": float(np.mean([r.dice for r in keyed])),
                    "mean_hd95": float(np.mean(hds)) if hds else None,
                    "hd95_undefined": len(keyed) - len(hds),
                    "mean_pred_volume": float(np.mean([r.pred_volume for r in keyed])),
                })
    tests = pairwise_tests(cells, model_ids, kinds, increments, per_image=per_image_tests)
    cell_rows = [cells[k] for k in sorted(cells)]
    return SweepReport(rows=agg_rows, tests=tests, cell_rows=cell_rows, gaps=gaps, seed=seed)
