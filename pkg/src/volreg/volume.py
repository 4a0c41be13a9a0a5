"""Core 3D volume and label types, file I/O, and preprocessing.

Array convention used throughout the package: scalar fields are numpy
arrays of shape ``(nz, ny, nx)`` in C order, so the flat buffer is
x-fastest (index = x + nx*(y + ny*z)). Dims tuples are ``(nx, ny, nz)``
and spacing tuples are ``(sx, sy, sz)`` in millimeters per voxel. All
types are immutable after construction (backing arrays are marked
read-only); operations return new objects.

File formats:
  * ``.vvol`` volume pair: ``<path>`` is a JSON header with fields
    {"dims", "spacing_mm", "dtype": "f32", "order": "x-fastest"} and the
    payload lives at ``<path>.raw`` as little-endian float32.
  * ``.lvol`` label pair: same layout with ``"dtype": "u16"``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

Triple = tuple[int, int, int]


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar field with voxel spacing.

    ``data`` has shape (nz, ny, nx), dtype float32, all values finite.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {arr.shape}")
        if any(n <= 0 for n in arr.shape):
            raise DataError(f"invalid dims {self.dims}: all must be positive")
        if not np.all(np.isfinite(arr)):
            raise DataError("volume contains non-finite values")
        arr = _freeze(arr.astype(np.float32, copy=False))
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"invalid spacing {self.spacing}")

    @property
    def dims(self) -> Triple:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return self.data.size

    @classmethod
    def from_flat(cls, dims: Triple, spacing, flat: np.ndarray) -> "Volume":
        nx, ny, nz = dims
        flat = np.asarray(flat, dtype=np.float32)
        if flat.size != nx * ny * nz:
            raise DataError(
                f"payload has {flat.size} values, dims {dims} require {nx * ny * nz}"
            )
        return cls(flat.reshape(nz, ny, nx), tuple(spacing))


@dataclass(frozen=True)
class LabelMap:
    """Dense 3D field of unsigned 16-bit region labels; 0 is background."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"label data must be 3D, got shape {arr.shape}")
        if arr.dtype != np.uint16:
            if np.any(arr < 0) or np.any(arr > np.iinfo(np.uint16).max):
                raise DataError("labels out of uint16 range")
            arr = arr.astype(np.uint16)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def dims(self) -> Triple:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def labels(self) -> list[int]:
        """Sorted nonzero labels present in the map."""
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel box: ``lo`` inclusive, ``hi`` exclusive, (x,y,z) order."""

    lo: Triple
    hi: Triple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if any(l < 0 for l in lo) or any(h <= l for l, h in zip(lo, hi)):
            raise DataError(f"invalid box lo={lo} hi={hi}")

    def check_within(self, dims: Triple) -> None:
        if any(h > n for h, n in zip(self.hi, dims)):
            raise DataError(f"box hi={self.hi} exceeds dims {dims}")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


def _raw_path(path: str) -> str:
    return str(path) + ".raw"


def _write_pair(path: str, dims: Triple, spacing, dtype_tag: str, flat: np.ndarray):
    header = {
        "dims": list(int(n) for n in dims),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype_tag,
        "order": "x-fastest",
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True)
            fh.write("\n")
        with open(_raw_path(path), "wb") as fh:
            fh.write(np.ascontiguousarray(flat, dtype=_DTYPES[dtype_tag]).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _read_pair(path: str, dtype_tag: str):
    if not os.path.exists(path):
        raise DataError(f"missing header file: {path}")
    if not os.path.exists(_raw_path(path)):
        raise DataError(f"missing payload file: {_raw_path(path)}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable header {path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise DataError(f"header {path} missing field '{key}'")
    if header["dtype"] != dtype_tag:
        raise DataError(f"{path}: expected dtype {dtype_tag}, got {header['dtype']}")
    if header["order"] != "x-fastest":
        raise DataError(f"{path}: unsupported order {header['order']}")
    dims = tuple(int(n) for n in header["dims"])
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise DataError(f"{path}: invalid dims {dims}")
    spacing = tuple(float(s) for s in header["spacing_mm"])
    dt = _DTYPES[dtype_tag]
    payload = np.fromfile(_raw_path(path), dtype=dt)
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise DataError(
            f"{path}: payload has {payload.size} values, header dims need {expected}"
        )
    return dims, spacing, payload


def save_volume(v: Volume, path: str) -> None:
    """Write a ``.vvol`` header/payload pair. Deterministic byte output."""
    _write_pair(path, v.dims, v.spacing, "f32", v.data.ravel())


def load_volume(path: str) -> Volume:
    """Load a ``.vvol`` pair written by :func:`save_volume`."""
    dims, spacing, payload = _read_pair(path, "f32")
    if not np.all(np.isfinite(payload)):
        raise DataError(f"{path}: payload contains non-finite values")
    return Volume.from_flat(dims, spacing, payload)


def save_labels(lm: LabelMap, path: str, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a ``.lvol`` pair. Spacing is recorded but not carried by LabelMap."""
    _write_pair(path, lm.dims, spacing, "u16", lm.data.ravel())


def load_labels(path: str) -> LabelMap:
    dims, _spacing, payload = _read_pair(path, "u16")
    nx, ny, nz = dims
    return LabelMap(payload.reshape(nz, ny, nx))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th order statistic.

    Deterministic, no interpolation; matches a sort-based reference exactly.
    """
    flat = np.asarray(values).ravel()
    n = flat.size
    if n == 0:
        raise DataError("percentile of empty array")
    rank = int(np.ceil(p / 100.0 * n))
    rank = min(max(rank, 1), n)
    return float(np.partition(flat, rank - 1)[rank - 1])


def normalize_percentile(v: Volume, p: float = 99.0) -> Volume:
    """Linear stretch of intensities to [0, 1] against the p-th percentile.

    out = clamp((x - x_min) / (x_p - x_min), 0, 1); values above the
    percentile clamp to 1. A constant input maps to all zeros.
    """
    data = v.data.astype(np.float64)
    x_min = float(data.min())
    x_p = nearest_rank_percentile(data, p)
    if x_p == x_min:
        out = np.zeros_like(data)
    else:
        out = np.clip((data - x_min) / (x_p - x_min), 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing)


def downsample2(v: Volume) -> Volume:
    """Halve every axis by averaging 2x2x2 blocks; spacing doubles per axis."""
    nz, ny, nx = v.data.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise DataError(f"downsample2 requires even dims, got {v.dims}")
    blocks = v.data.astype(np.float64).reshape(nz // 2, 2, ny // 2, 2, nx // 2, 2)
    out = blocks.sum(axis=(1, 3, 5)) / 8.0
    sx, sy, sz = v.spacing
    return Volume(out.astype(np.float32), (2 * sx, 2 * sy, 2 * sz))


def crop(v: Volume, box: BoundingBox) -> Volume:
    """Copy the sub-volume selected by ``box``; spacing preserved."""
    box.check_within(v.dims)
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    return Volume(v.data[z0:z1, y0:y1, x0:x1].copy(), v.spacing)


def _centroid(data: np.ndarray) -> np.ndarray:
    """Intensity-weighted centroid in (x, y, z) voxel coordinates."""
    w = data.astype(np.float64)
    total = w.sum()
    if total == 0.0:
        raise DataError("centroid undefined for all-zero volume")
    nz, ny, nx = data.shape
    zz = w.sum(axis=(1, 2)) @ np.arange(nz)
    yy = w.sum(axis=(0, 2)) @ np.arange(ny)
    xx = w.sum(axis=(0, 1)) @ np.arange(nx)
    return np.array([xx, yy, zz]) / total


def translate_int(v: Volume, shift: Triple) -> Volume:
    """Translate by an integer voxel shift with edge clamping.

    out(p) = v(clamp(p - shift)); shift in (x, y, z) voxels.
    """
    nz, ny, nx = v.data.shape
    dx, dy, dz = (int(s) for s in shift)
    ix = np.clip(np.arange(nx) - dx, 0, nx - 1)
    iy = np.clip(np.arange(ny) - dy, 0, ny - 1)
    iz = np.clip(np.arange(nz) - dz, 0, nz - 1)
    out = v.data[np.ix_(iz, iy, ix)]
    return Volume(out.copy(), v.spacing)


def com_align(moving: Volume, fixed: Volume) -> tuple[Triple, Volume]:
    """Integer-translation pre-alignment by intensity-weighted centroids.

    Returns (shift, aligned) where shift = round(centroid(fixed) -
    centroid(moving)) in (x, y, z) voxels and aligned is ``moving``
    translated by that shift with edge clamping.
    """
    if moving.dims != fixed.dims:
        raise DataError(f"dims mismatch: {moving.dims} vs {fixed.dims}")
    c_m = _centroid(moving.data)
    c_f = _centroid(fixed.data)
    shift = tuple(int(np.rint(d)) for d in (c_f - c_m))
    return shift, translate_int(moving, shift)
