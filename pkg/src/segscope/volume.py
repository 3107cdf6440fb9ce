"""Dense 3D volume type and the preprocessing math used across the toolkit.

Volumes are value-semantic: operations never mutate their inputs, so
instances are safe to share read-only across parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "GridVolume",
    "BinaryMask",
    "ProbabilityMap",
    "GridMismatchError",
    "check_same_grid",
    "geometric_mean",
    "pad_to_grid",
    "normalize_intensity",
    "coord_channels",
    "gaussian_smooth",
    "FWHM_TO_SIGMA",
]

# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class GridMismatchError(ValueError):
    """Two volumes do not share dimensions and voxel spacing."""


@dataclass(frozen=True)
class GridVolume:
    """A dense scalar field on a regular 3D grid.

    ``data`` is an (nx, ny, nz) float64 array; the canonical linear order of
    voxels is x-fastest (Fortran order), matching on-disk NIfTI layout.
    ``spacing`` is the voxel size in mm per axis.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains NaN or Inf")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray) -> "GridVolume":
        """New volume on the same grid with replaced values."""
        return GridVolume(data, self.spacing)

    def same_grid(self, other: "GridVolume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)


@dataclass(frozen=True)
class BinaryMask(GridVolume):
    """A GridVolume whose voxels are exactly 0 or 1."""

    def __post_init__(self):
        super().__post_init__()
        bad = (self.data != 0.0) & (self.data != 1.0)
        if bad.any():
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def volume_voxels(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ProbabilityMap(GridVolume):
    """A GridVolume whose voxels lie in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("probability values must lie in [0, 1]")


def check_same_grid(*volumes: GridVolume) -> None:
    ref = volumes[0]
    for v in volumes[1:]:
        if v.dims != ref.dims:
            raise GridMismatchError(f"dims differ: {v.dims} vs {ref.dims}")
        if not np.allclose(v.spacing, ref.spacing):
            raise GridMismatchError(f"spacing differs: {v.spacing} vs {ref.spacing}")


def geometric_mean(volumes: list[GridVolume]) -> GridVolume:
    """Per-voxel geometric mean of co-registered volumes.

    Computed in the log domain; any voxel where some input is 0 yields 0.
    All inputs must be non-negative and share the grid.
    """
    if not volumes:
        raise ValueError("geometric_mean requires at least one volume")
    check_same_grid(*volumes)
    stack = np.stack([v.data for v in volumes])
    if stack.min() < 0:
        raise ValueError("geometric_mean requires non-negative values")
    zero = (stack == 0).any(axis=0)
    with np.errstate(divide="ignore"):
        logs = np.log(np.where(stack > 0, stack, 1.0))
    out = np.exp(logs.mean(axis=0))
    out[zero] = 0.0
    return volumes[0].with_data(out)


def pad_to_grid(v: GridVolume, target: tuple[int, int, int], fill: float = 0.0) -> GridVolume:
    """Center ``v`` in a larger grid, padding with ``fill``.

    The lower-side offset per axis is floor((target - source) / 2), so a
    91x109x91 volume lands at offsets (2, 9, 2) inside 96x128x96.
    """
    src = v.dims
    if any(t < s for t, s in zip(target, src)):
        raise ValueError(f"target {target} smaller than source {src} on some axis")
    out = np.full(target, float(fill), dtype=np.float64)
    lo = [(t - s) // 2 for t, s in zip(target, src)]
    out[lo[0]:lo[0] + src[0], lo[1]:lo[1] + src[1], lo[2]:lo[2] + src[2]] = v.data
    return GridVolume(out, v.spacing)


def normalize_intensity(v: GridVolume) -> GridVolume:
    """Remove the mean, then min-max rescale to [0, 1].

    A constant volume maps to all zeros (the rescale would otherwise divide
    by zero).
    """
    centered = v.data - v.data.mean()
    lo, hi = centered.min(), centered.max()
    if hi == lo:
        return v.with_data(np.zeros_like(v.data))
    return v.with_data((centered - lo) / (hi - lo))


def coord_channels(dims: tuple[int, int, int]) -> tuple[GridVolume, GridVolume, GridVolume]:
    """Coordinate channels: X holds i at voxel (i,j,k), Y holds j, Z holds k."""
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    xs, ys, zs = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    return GridVolume(xs), GridVolume(ys), GridVolume(zs)


def gaussian_smooth(v: GridVolume, fwhm_mm: float) -> GridVolume:
    """Separable Gaussian smoothing with a kernel given in mm FWHM.

    sigma_mm = fwhm / (2*sqrt(2 ln 2)), converted per-axis to voxel units via
    the volume's spacing. Boundaries are zero-padded, which suits lesion
    density maps whose background is 0.
    """
    if fwhm_mm < 0:
        raise ValueError("fwhm must be non-negative")
    if fwhm_mm == 0:
        return v.with_data(v.data.copy())
    sigma_vox = [fwhm_mm * FWHM_TO_SIGMA / s for s in v.spacing]
    out = ndimage.gaussian_filter(v.data, sigma=sigma_vox, mode="constant", cval=0.0)
    return v.with_data(out)
