"""Minimal NIfTI-1 reading and writing.

Supports single-file little-endian NIfTI-1 (*.nii, *.nii.gz) with datatype
uint8, int16 or float32, which covers SPM-exported volumes. No orientation
handling beyond pixdim: callers are expected to work with co-registered
data on a shared grid.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .volume import GridVolume

__all__ = ["NiftiError", "read_volume", "write_volume", "HEADER_DTYPE", "DTYPE_CODES"]


class NiftiError(ValueError):
    """File is not a NIfTI-1 volume this toolkit can handle."""


# 348-byte NIfTI-1 header, little-endian
HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348

DTYPE_CODES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
CODE_FOR_NAME = {"uint8": 2, "int16": 4, "float32": 16}
BITPIX = {2: 8, 4: 16, 16: 32}


def _open_for_read(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_volume(path) -> tuple[GridVolume, dict]:
    """Read a NIfTI-1 file into a GridVolume plus selected header metadata.

    scl_slope/scl_inter are applied to the voxel data whenever slope is
    nonzero and finite.
    """
    path = Path(path)
    with _open_for_read(path) as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if hdr["magic"] not in (b"n+1", b"n+1\0"):
        raise NiftiError(f"{path}: not NIfTI-1 (magic {hdr['magic']!r})")
    if int(hdr["sizeof_hdr"]) != 348:
        raise NiftiError(f"{path}: bad sizeof_hdr {int(hdr['sizeof_hdr'])} (big-endian unsupported)")
    ndim = int(hdr["dim"][0])
    if ndim not in (3, 4):
        raise NiftiError(f"{path}: dim[0]={ndim} unsupported (need 3 or 4)")
    if ndim == 4 and int(hdr["dim"][4]) > 1:
        raise NiftiError(f"{path}: 4D file with {int(hdr['dim'][4])} timepoints unsupported")
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    code = int(hdr["datatype"])
    if code not in DTYPE_CODES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dt = DTYPE_CODES[code]
    offset = int(hdr["vox_offset"])
    n = dims[0] * dims[1] * dims[2]
    need = offset + n * dt.itemsize
    if len(raw) < need:
        raise NiftiError(f"{path}: truncated payload ({len(raw)} < {need} bytes)")
    flat = np.frombuffer(raw[offset:need], dtype=dt).astype(np.float64)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        flat = flat * slope + (inter if np.isfinite(inter) else 0.0)
    data = flat.reshape(dims, order="F")
    spacing = tuple(float(abs(p)) or 1.0 for p in hdr["pixdim"][1:4])
    meta = {
        "datatype": code,
        "scl_slope": slope,
        "scl_inter": inter,
        "descrip": hdr["descrip"].tobytes().rstrip(b"\0").decode("ascii", "replace"),
    }
    return GridVolume(data, spacing), meta


def write_volume(v: GridVolume, path, datatype: str = "float32", descrip: str = "") -> None:
    """Write a GridVolume as single-file little-endian NIfTI-1.

    ``datatype`` is one of uint8, int16, float32. float32 data round-trips
    bit-exactly (scl_slope is written as 0, meaning no scaling).
    """
    if datatype not in CODE_FOR_NAME:
        raise NiftiError(f"unsupported write datatype {datatype!r}")
    code = CODE_FOR_NAME[datatype]
    dt = DTYPE_CODES[code]
    hdr = np.zeros(1, dtype=HEADER_DTYPE)[0]
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = v.dims
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = BITPIX[code]
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = v.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 0.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip.encode("ascii", "replace")[:79]
    hdr["magic"] = b"n+1"
    payload = np.asarray(v.data, order="F").astype(dt).tobytes(order="F")
    blob = hdr.tobytes() + b"\0\0\0\0" + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # mtime pinned so identical volumes give byte-identical files
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
