"""Deterministic synthetic phantoms: a brain-like ellipsoid with textured
background, blob lesions sampled inside archetype regions, and a
susceptibility-like artefact blob in controls.

The phantom is designed so the builtin threshold segmenter behaves like a
plausible model: lesions segment almost perfectly on clean images (a thin
random-intensity halo around each lesion injects small per-study score
variation), the artefact blob straddles threshold sweeps, and noise
degrades scores smoothly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corruption import derive_seed
from .folds import ArchetypeAtlas, StudyRecord
from .nifti import write_volume
from .volume import BinaryMask, GridVolume

__all__ = ["PhantomSpec", "make_archetype_atlas", "make_phantom", "make_dataset"]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    background_intensity: float = 0.4
    lesion_intensity: float = 0.9
    artefact_intensity: float = 0.65
    artefact_prob: float = 0.5
    artefact_jitter: float = 0.04
    texture_amplitude: float = 0.03
    halo_low: float = 0.46
    halo_high: float = 0.547
    n_archetypes: int = 4
    archetype_sigma_vox: float = 3.0
    lesion_log_radius_mean: float = 1.44  # exp(1.44) ~ 4.2 voxels
    lesion_log_radius_sd: float = 0.22
    lesion_radius_range: tuple[float, float] = (2.4, 7.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("background_intensity", "lesion_intensity", "artefact_intensity"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n_archetypes < 1:
            raise ValueError("need at least one archetype")


def _brain_mask(spec: PhantomSpec) -> np.ndarray:
    nx, ny, nz = spec.dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    ax, ay, az = 0.42 * nx, 0.45 * ny, 0.40 * nz
    r2 = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2
    return r2 <= 1.0


def _gaussian_bump(dims, center, sigma) -> np.ndarray:
    x, y, z = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return np.exp(-r2 / (2.0 * sigma ** 2))


def _artefact_center(spec: PhantomSpec) -> tuple[float, float, float]:
    # fixed inferior-frontal location: anterior in y, low in z
    nx, ny, nz = spec.dims
    return (0.5 * (nx - 1), 0.78 * (ny - 1), 0.30 * (nz - 1))


def make_archetype_atlas(spec: PhantomSpec, threshold: float = 0.10) -> ArchetypeAtlas:
    """K smooth blob frequency maps at fixed, well-separated centers inside
    the brain ellipsoid; deterministic given the spec seed."""
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(derive_seed(spec.seed, "atlas"))
    base = np.array([
        (0.32, 0.35, 0.55), (0.68, 0.35, 0.55),
        (0.32, 0.62, 0.45), (0.68, 0.62, 0.45),
        (0.50, 0.30, 0.40), (0.50, 0.68, 0.60),
        (0.36, 0.50, 0.62), (0.64, 0.50, 0.38),
    ])
    if spec.n_archetypes > base.shape[0]:
        extra = rng.uniform(0.30, 0.70, size=(spec.n_archetypes - base.shape[0], 3))
        base = np.vstack([base, extra])
    maps = []
    for i in range(spec.n_archetypes):
        center = base[i] * (np.asarray(spec.dims) - 1)
        bump = _gaussian_bump(spec.dims, center, spec.archetype_sigma_vox)
        bump[~_brain_mask(spec)] = 0.0
        maps.append(GridVolume(bump, spec.spacing))
    return ArchetypeAtlas(maps=maps, threshold=threshold)


def _base_brain(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    brain = _brain_mask(spec)
    noise = rng.normal(0.0, 1.0, size=spec.dims)
    smooth = ndimage.gaussian_filter(noise, sigma=2.5)
    peak = np.abs(smooth).max()
    texture = smooth / peak * spec.texture_amplitude if peak > 0 else smooth
    image = np.zeros(spec.dims)
    image[brain] = spec.background_intensity + texture[brain]
    return image, brain


def _sample_lesion(spec: PhantomSpec, atlas: ArchetypeAtlas, archetype_index: int,
                   brain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    core = atlas.mask(archetype_index).data.astype(bool) & brain
    candidates = np.argwhere(core)
    center = candidates[int(rng.integers(candidates.shape[0]))]
    radius = float(np.exp(rng.normal(spec.lesion_log_radius_mean, spec.lesion_log_radius_sd)))
    radius = float(np.clip(radius, *spec.lesion_radius_range))
    stretch = rng.uniform(0.8, 1.25, size=3)
    x, y, z = np.meshgrid(*(np.arange(n) for n in spec.dims), indexing="ij")
    r2 = (((x - center[0]) / stretch[0]) ** 2
          + (((y - center[1]) / stretch[1]) ** 2)
          + (((z - center[2]) / stretch[2]) ** 2))
    lesion = (r2 <= radius ** 2) & brain
    if not lesion.any():
        lesion[tuple(center)] = True
    return lesion


def make_phantom(
    spec: PhantomSpec,
    with_lesion: bool,
    archetype_index: int = 0,
    seed: int = 0,
    study_id: str = "",
    atlas: ArchetypeAtlas | None = None,
) -> tuple[GridVolume, BinaryMask, StudyRecord]:
    """One phantom image, its exact lesion mask (empty for controls), and a
    demographic record. Deterministic given (spec, seed)."""
    if atlas is None:
        atlas = make_archetype_atlas(spec)
    if with_lesion and not 0 <= archetype_index < atlas.k:
        raise ValueError(f"archetype index {archetype_index} out of range (K={atlas.k})")
    rng = np.random.default_rng(seed)
    image, brain = _base_brain(spec, rng)
    mask = np.zeros(spec.dims, dtype=bool)

    if with_lesion:
        mask = _sample_lesion(spec, atlas, archetype_index, brain, rng)
        halo = ndimage.binary_dilation(mask) & brain & ~mask
        image[mask] = spec.lesion_intensity
        image[halo] = rng.uniform(spec.halo_low, spec.halo_high, size=int(halo.sum()))
    else:
        if rng.uniform() < spec.artefact_prob:
            peak = spec.artefact_intensity + rng.uniform(-spec.artefact_jitter, spec.artefact_jitter)
            bump = _gaussian_bump(spec.dims, _artefact_center(spec), sigma=2.2)
            bump[~brain] = 0.0
            artefact = spec.background_intensity + (peak - spec.background_intensity) * bump
            image = np.maximum(image, np.where(brain, artefact, 0.0))

    age = float(np.clip(rng.normal(67.0, 15.0), 18.0, 100.0))
    sex = "F" if rng.uniform() < 0.5 else "M"
    record = StudyRecord(
        id=study_id or f"phantom_{seed}",
        lesion_volume=int(mask.sum()),
        age=age,
        sex=sex,
        phenotype=archetype_index if with_lesion else None,
        is_control=not with_lesion,
    )
    return GridVolume(image, spec.spacing), BinaryMask(mask.astype(np.float64), spec.spacing), record


def make_dataset(n_pos: int, n_ctrl: int, spec: PhantomSpec, out_dir) -> list[StudyRecord]:
    """Write a phantom dataset (NIfTI images, labels, JSON manifest) to
    ``out_dir``. Archetypes are assigned round-robin; everything is
    reproducible from the spec seed."""
    if n_pos < 0 or n_ctrl < 0:
        raise ValueError("counts must be >= 0")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if n_pos:
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    atlas = make_archetype_atlas(spec)
    records = []
    for i in range(n_pos):
        sid = f"lesion_{i:04d}"
        image, mask, rec = make_phantom(
            spec, with_lesion=True, archetype_index=i % spec.n_archetypes,
            seed=derive_seed(spec.seed, sid), study_id=sid, atlas=atlas,
        )
        image_path = out_dir / "images" / f"{sid}.nii.gz"
        label_path = out_dir / "labels" / f"{sid}.nii.gz"
        write_volume(image, image_path, "float32")
        write_volume(mask, label_path, "uint8")
        rec.image_path = str(image_path)
        rec.label_path = str(label_path)
        records.append(rec)
    for i in range(n_ctrl):
        sid = f"control_{i:04d}"
        image, _, rec = make_phantom(
            spec, with_lesion=False, seed=derive_seed(spec.seed, sid), study_id=sid, atlas=atlas,
        )
        image_path = out_dir / "images" / f"{sid}.nii.gz"
        write_volume(image, image_path, "float32")
        rec.image_path = str(image_path)
        records.append(rec)
    manifest = [r.to_json() for r in records]
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records
