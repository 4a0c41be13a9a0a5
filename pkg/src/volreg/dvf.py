"""Displacement fields, the random field simulator, and spatial warping.

A displacement field u assigns every voxel p a 3-vector in voxel units;
the transform is phi = Id + u and warping is backward: the output at p
samples the moving image at p + u(p), with sample coordinates clamped to
the volume extent.

``.dvf`` file pair: ``<path>`` is a JSON header {"dims", "units":
"voxels", "components": 3, "order"} and ``<path>.raw`` holds
little-endian float32 samples interleaved per voxel as (ux, uy, uz).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError, PlacementError
from .volume import LabelMap, Triple, Volume, _freeze


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors, component order (ux, uy, uz).

    ``u`` has shape (3, nz, ny, nx), dtype float32, finite values.
    """

    u: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.u)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise DataError(f"field must have shape (3, nz, ny, nx), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("field contains non-finite values")
        object.__setattr__(self, "u", _freeze(arr.astype(np.float32, copy=False)))

    @property
    def dims(self) -> Triple:
        _, nz, ny, nx = self.u.shape
        return (nx, ny, nz)

    @classmethod
    def zero(cls, dims: Triple) -> "DisplacementField":
        nx, ny, nz = dims
        return cls(np.zeros((3, nz, ny, nx), dtype=np.float32))

    def max_component_abs(self) -> float:
        return float(np.abs(self.u).max())


@dataclass(frozen=True)
class DvfSimParams:
    """Random-field simulator settings.

    ``p_points`` displacement seeds are placed pairwise at least ``d_p``
    voxels apart, each given a uniform random vector in [-delta, delta]
    per component, and the sparse field is smoothed with a normalized
    Gaussian kernel of std ``sigma_s``. Because the kernel is normalized,
    smoothing strongly attenuates isolated spikes, so ``delta`` is a
    pre-smoothing amplitude, not the resulting displacement magnitude;
    :meth:`scaled_for` picks a calibrated amplitude for a given grid.
    """

    p_points: int = 100
    d_p: float = 40.0
    delta: float = 6.0
    sigma_s: float = 20.0
    sigma_n: float = 0.001
    global_shift_max: float = 0.0
    seed: int = 0
    max_attempts: int | None = None

    def __post_init__(self):
        if self.p_points < 1:
            raise DataError("p_points must be >= 1")
        if self.d_p < 0 or self.delta < 0 or self.sigma_n < 0:
            raise DataError("d_p, delta and sigma_n must be nonnegative")

    @property
    def attempt_budget(self) -> int:
        return self.max_attempts if self.max_attempts is not None else 1000 * self.p_points

    _REFERENCE_DIMS = (160, 160, 256)
    # Pre-smoothing amplitude that lands the default simulation in the
    # paper-matched pre-registration overlap band (mean label DSC ~0.725)
    # on the synthetic phantoms; fixed by one-time calibration.
    _PEAK_FACTOR = 4.75

    @classmethod
    def scaled_for(cls, dims: Triple, seed: int = 0) -> "DvfSimParams":
        """Defaults rescaled from the reference grid to ``dims``.

        Distances shrink with the linear size ratio; the point count is
        capped so rejection placement stays feasible; the amplitude is
        calibrated so smoothed peak displacements keep the same
        proportion to the grid as the reference defaults.
        """
        ref = cls._REFERENCE_DIMS
        r = (float(np.prod(dims)) / float(np.prod(ref))) ** (1.0 / 3.0)
        d_p = max(3.0, 40.0 * r)
        sigma_s = d_p / 2.0
        body_voxels = 0.30 * float(np.prod(dims))
        cap = int(0.36 * body_voxels / d_p**3)
        p_points = max(4, min(100, cap))
        target_peak = 6.0 * r * cls._PEAK_FACTOR
        k0 = float(_gauss_kernel(sigma_s)[len(_gauss_kernel(sigma_s)) // 2])
        delta = target_peak / k0**3
        return cls(
            p_points=p_points,
            d_p=d_p,
            delta=delta,
            sigma_s=sigma_s,
            seed=seed,
        )


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------


def _gauss_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian kernel truncated at radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def gaussian_smooth(field: DisplacementField, sigma: float) -> DisplacementField:
    """Separable Gaussian smoothing per component with zero padding.

    sigma = 0 returns the field unchanged. Border voxels attenuate
    because out-of-range samples are treated as zero.
    """
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if sigma == 0:
        return field
    kernel = _gauss_kernel(sigma)
    out = field.u.astype(np.float64)
    for axis in (1, 2, 3):
        out = correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return DisplacementField(out.astype(np.float32))


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def _sample_coords(u: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped absolute sample coordinates (cx, cy, cz) for p + u(p)."""
    nz, ny, nx = shape
    gz, gy, gx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    cx = np.clip(gx + u[0], 0.0, nx - 1.0)
    cy = np.clip(gy + u[1], 0.0, ny - 1.0)
    cz = np.clip(gz + u[2], 0.0, nz - 1.0)
    return cx, cy, cz


def _corner_setup(c: np.ndarray, n: int):
    """Lower corner index and fractional offset for 1D linear interpolation."""
    i0 = np.floor(c).astype(np.intp)
    np.clip(i0, 0, max(n - 2, 0), out=i0)
    t = c - i0
    return i0, t


def _gather(data: np.ndarray, iz, iy, ix) -> np.ndarray:
    nz, ny, nx = data.shape
    flat = data.reshape(-1)
    return flat[(iz * ny + iy) * nx + ix]


def _trilinear(data: np.ndarray, cx, cy, cz, with_grad: bool = False):
    """Trilinear interpolation of ``data`` at clamped coordinates.

    With ``with_grad`` also returns the spatial derivatives of the
    interpolant with respect to each coordinate.
    """
    nz, ny, nx = data.shape
    x0, tx = _corner_setup(cx, nx)
    y0, ty = _corner_setup(cy, ny)
    z0, tz = _corner_setup(cz, nz)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    v000 = _gather(data, z0, y0, x0)
    v100 = _gather(data, z0, y0, x1)
    v010 = _gather(data, z0, y1, x0)
    v110 = _gather(data, z0, y1, x1)
    v001 = _gather(data, z1, y0, x0)
    v101 = _gather(data, z1, y0, x1)
    v011 = _gather(data, z1, y1, x0)
    v111 = _gather(data, z1, y1, x1)

    c00 = v000 * (1 - tx) + v100 * tx
    c10 = v010 * (1 - tx) + v110 * tx
    c01 = v001 * (1 - tx) + v101 * tx
    c11 = v011 * (1 - tx) + v111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    if not with_grad:
        return out

    dx00 = v100 - v000
    dx10 = v110 - v010
    dx01 = v101 - v001
    dx11 = v111 - v011
    gx = (dx00 * (1 - ty) + dx10 * ty) * (1 - tz) + (dx01 * (1 - ty) + dx11 * ty) * tz
    gy = (c10 - c00) * (1 - tz) + (c11 - c01) * tz
    gz = c1 - c0
    return out, gx, gy, gz


def _warp_array(data: np.ndarray, u: np.ndarray) -> np.ndarray:
    cx, cy, cz = _sample_coords(u, data.shape)
    return _trilinear(data.astype(np.float64), cx, cy, cz)


def warp_volume(v: Volume, field: DisplacementField) -> Volume:
    """Backward trilinear warp: out(p) = v(p + u(p)), edge-clamped.

    The zero field reproduces the input bit-exactly; outputs always lie
    within [min(v), max(v)].
    """
    if v.dims != field.dims:
        raise DataError(f"dims mismatch: volume {v.dims} vs field {field.dims}")
    out = _warp_array(v.data, field.u.astype(np.float64))
    return Volume(out.astype(np.float32), v.spacing)


def warp_labels(lm: LabelMap, field: DisplacementField) -> LabelMap:
    """Backward nearest-neighbor warp of a label map.

    Coordinate ties round half-away-from-zero per axis (coordinates are
    nonnegative after clamping, so this is floor(c + 0.5)).
    """
    if lm.dims != field.dims:
        raise DataError(f"dims mismatch: labels {lm.dims} vs field {field.dims}")
    u = field.u.astype(np.float64)
    cx, cy, cz = _sample_coords(u, lm.data.shape)
    nz, ny, nx = lm.data.shape
    ix = np.minimum(np.floor(cx + 0.5).astype(np.intp), nx - 1)
    iy = np.minimum(np.floor(cy + 0.5).astype(np.intp), ny - 1)
    iz = np.minimum(np.floor(cz + 0.5).astype(np.intp), nz - 1)
    return LabelMap(_gather(lm.data, iz, iy, ix))


def add_noise(v: Volume, sigma_n: float, seed: int) -> Volume:
    """Add i.i.d. Gaussian noise and clamp to [0, 1]. sigma_n = 0 is identity."""
    if sigma_n < 0:
        raise DataError("sigma_n must be >= 0")
    if sigma_n == 0:
        return v
    rng = np.random.default_rng(seed)
    noisy = v.data.astype(np.float64) + rng.normal(0.0, sigma_n, size=v.data.shape)
    return Volume(np.clip(noisy, 0.0, 1.0).astype(np.float32), v.spacing)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


def _place_points(
    rng: np.random.Generator,
    dims: Triple,
    params: DvfSimParams,
    mask: np.ndarray | None,
) -> np.ndarray:
    """Rejection-sample p_points grid points pairwise >= d_p apart.

    Returns integer points as rows of (x, y, z). Raises PlacementError
    when the attempt budget is exhausted.
    """
    nx, ny, nz = dims
    if mask is not None:
        cand = np.argwhere(mask)  # rows (z, y, x)
        if cand.shape[0] < params.p_points:
            raise DataError(
                f"mask has {cand.shape[0]} candidate voxels, need {params.p_points}"
            )
    accepted = np.empty((params.p_points, 3), dtype=np.float64)
    count = 0
    min_sq = params.d_p * params.d_p
    for _ in range(params.attempt_budget):
        if mask is not None:
            z, y, x = cand[rng.integers(cand.shape[0])]
        else:
            x = rng.integers(nx)
            y = rng.integers(ny)
            z = rng.integers(nz)
        pt = np.array([x, y, z], dtype=np.float64)
        if count and np.min(np.sum((accepted[:count] - pt) ** 2, axis=1)) < min_sq:
            continue
        accepted[count] = pt
        count += 1
        if count == params.p_points:
            return accepted
    raise PlacementError(
        f"placed {count}/{params.p_points} points within {params.attempt_budget} attempts"
    )


def simulate_dvf(
    dims: Triple,
    params: DvfSimParams,
    mask: "object | None" = None,
) -> DisplacementField:
    """Generate a random smooth displacement field on ``dims``.

    Points are sampled uniformly from ``mask`` (a BodyMask or boolean
    array matching dims) or the whole grid, each assigned a vector with
    components uniform in [-delta, delta]; the sparse field is Gaussian
    smoothed, then an optional global shift with components uniform in
    [-global_shift_max, global_shift_max] is added everywhere.
    Deterministic given (dims, params, mask).
    """
    nx, ny, nz = dims
    mask_arr = None
    if mask is not None:
        mask_arr = np.asarray(getattr(mask, "data", mask), dtype=bool)
        if mask_arr.shape != (nz, ny, nx):
            raise DataError(f"mask shape {mask_arr.shape} does not match dims {dims}")
    rng = np.random.default_rng(np.random.SeedSequence((params.seed, 0x51)))
    points = _place_points(rng, dims, params, mask_arr)
    vectors = rng.uniform(-params.delta, params.delta, size=(params.p_points, 3))
    sparse = np.zeros((3, nz, ny, nx), dtype=np.float64)
    for (x, y, z), vec in zip(points.astype(np.intp), vectors):
        sparse[:, z, y, x] = vec
    field = gaussian_smooth(DisplacementField(sparse.astype(np.float32)), params.sigma_s)
    if params.global_shift_max > 0:
        shift = rng.uniform(-params.global_shift_max, params.global_shift_max, size=3)
        shifted = field.u.astype(np.float64) + shift[:, None, None, None]
        field = DisplacementField(shifted.astype(np.float32))
    return field


def make_deformed_pair(
    v: Volume,
    lm: LabelMap | None,
    params: DvfSimParams,
    mask: "object | None" = None,
) -> tuple[Volume, LabelMap | None, DisplacementField]:
    """Simulate a field, warp volume and labels with it, add noise.

    Returns (moving, moving_labels, gt_field); the ground-truth field is
    kept for supervised evaluation.
    """
    if lm is not None and lm.dims != v.dims:
        raise DataError(f"dims mismatch: volume {v.dims} vs labels {lm.dims}")
    field = simulate_dvf(v.dims, params, mask)
    noise_seed = int(np.random.SeedSequence((params.seed, 0x17)).generate_state(1)[0])
    moving = add_noise(warp_volume(v, field), params.sigma_n, noise_seed)
    moving_labels = warp_labels(lm, field) if lm is not None else None
    return moving, moving_labels, field


def derive_params(params: DvfSimParams, *key: int) -> DvfSimParams:
    """Copy of ``params`` with a seed derived deterministically from ``key``."""
    seed = int(np.random.SeedSequence((params.seed, *key)).generate_state(1)[0])
    return replace(params, seed=seed)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def save_field(field: DisplacementField, path: str) -> None:
    header = {
        "dims": [int(n) for n in field.dims],
        "units": "voxels",
        "components": 3,
        "order": "x-fastest, components interleaved (ux,uy,uz)",
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True)
            fh.write("\n")
        interleaved = np.moveaxis(field.u, 0, -1)  # (nz, ny, nx, 3)
        with open(path + ".raw", "wb") as fh:
            fh.write(np.ascontiguousarray(interleaved, dtype="<f4").tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_field(path: str) -> DisplacementField:
    if not os.path.exists(path) or not os.path.exists(path + ".raw"):
        raise DataError(f"missing field file pair for {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable header {path}: {exc}") from exc
    dims = tuple(int(n) for n in header.get("dims", ()))
    if len(dims) != 3 or header.get("components") != 3:
        raise DataError(f"{path}: invalid field header")
    nx, ny, nz = dims
    payload = np.fromfile(path + ".raw", dtype="<f4")
    if payload.size != 3 * nx * ny * nz:
        raise DataError(f"{path}: payload size {payload.size} does not match dims {dims}")
    interleaved = payload.reshape(nz, ny, nx, 3)
    return DisplacementField(np.moveaxis(interleaved, -1, 0))
