"""Synthetic longitudinal abdominal-like phantoms.

Each patient is a torso-like body (an x-y ellipse whose cross-section
tapers along z), a stack of bright axis-aligned vertebra boxes offset
laterally from the slice center, and a detached table slab near the
y-min face. Later timepoints warp the body content with a fresh random
displacement field and apply a small global intensity drift; the table
is pasted unwarped so it is identical across timepoints.

Geometry is randomized per patient but constrained so that the strip
seed square always lands on homogeneous body tissue, vertebrae stay
inside the body, and the table never touches any timepoint's body.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

from .bodymask import BodyMask, StripParams
from .dvf import (
    DisplacementField,
    DvfSimParams,
    _gauss_kernel,
    derive_params,
    simulate_dvf,
    warp_labels,
    warp_volume,
)
from .errors import DataError
from .volume import LabelMap, Triple, Volume, load_labels, load_volume, save_labels, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    """Generator settings; intensities are in normalized [0, 1] units."""

    dims: Triple = (32, 32, 64)
    n_patients: int = 4
    n_timepoints: int = 4
    n_vertebrae: int = 7
    body_intensity: float = 0.3
    vertebra_intensity: float = 0.9
    table_intensity: float = 0.8
    texture_amplitude: float = 0.04
    texture_sigma: float = 2.0
    drift_std: float = 0.02
    smooth_sigma: float = 0.35
    variation: DvfSimParams | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("body_intensity", "vertebra_intensity", "table_intensity"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0):
                raise DataError(f"{name} must be in [0, 1], got {val}")
        if self.n_vertebrae < 1 or self.n_patients < 1 or self.n_timepoints < 1:
            raise DataError("counts must be >= 1")

    def variation_params(self) -> DvfSimParams:
        return self.variation if self.variation is not None else DvfSimParams.scaled_for(self.dims)


@dataclass(frozen=True)
class PhantomScan:
    """One timepoint: image, vertebra labels, and ground-truth masks."""

    volume: Volume
    labels: LabelMap
    table_mask: np.ndarray
    body_mask: BodyMask

    @property
    def strip_target(self) -> np.ndarray:
        """Homogeneous-body ground truth for the region-growing extractor:
        body voxels minus the (inhomogeneous) vertebra boxes."""
        return self.body_mask.data & (self.labels.data == 0)


def _smooth3(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    kernel = _gauss_kernel(sigma)
    out = arr.astype(np.float64)
    for axis in (0, 1, 2):
        out = correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out


def _body_region(dims: Triple, cx, cy, a, b, c) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    czc = (nz - 1) / 2.0
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - czc) / c) ** 4 <= 1.0


def make_patient(spec: PhantomSpec, patient_seed: int) -> list[PhantomScan]:
    """Generate one patient's chronologically ordered scans."""
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x9A, patient_seed)))

    cx = nx / 2.0 + rng.uniform(-1.0, 1.0)
    cy = ny / 2.0 + rng.uniform(-1.0, 1.0)
    a = rng.uniform(0.38, 0.42) * nx
    b = rng.uniform(0.33, 0.37) * ny
    c = rng.uniform(0.56, 0.62) * nz
    body = _body_region(spec.dims, cx, cy, a, b, c)

    # Vertebra stack, offset to -x so the centered strip seed stays on
    # homogeneous body tissue.
    n_vert = spec.n_vertebrae
    z_lo, z_hi = 0.25 * nz, 0.75 * nz
    centers_z = (
        np.linspace(z_lo, z_hi, n_vert) if n_vert > 1 else np.array([(z_lo + z_hi) / 2])
    )
    spacing_z = (z_hi - z_lo) / max(n_vert - 1, 1)
    hz = max(2, int(round(0.45 * spacing_z))) if n_vert > 1 else max(2, int(0.1 * nz))
    half = max(2, int(round(rng.uniform(0.115, 0.135) * nx)))
    vx = cx - 0.15 * nx + rng.uniform(-0.5, 0.5)
    vy = cy + rng.uniform(-0.5, 0.5)
    seed_x_start = nx // 2 - max(1, int(25 * min(nx, ny) / 512))
    while int(round(vx + half)) > seed_x_start and vx > half + 1:
        vx -= 0.5
    czc = (nz - 1) / 2.0

    def fits(hxy: int) -> bool:
        for zc in centers_z:
            z_far = zc + hz if abs(zc + hz - czc) > abs(zc - hz - czc) else zc - hz
            margin = 1.0 - ((z_far - czc) / c) ** 4
            if margin <= 0:
                return False
            worst = max(
                ((vx + sx * hxy - cx) / a) ** 2 + ((vy + sy * hxy - cy) / b) ** 2
                for sx in (-1, 1)
                for sy in (-1, 1)
            )
            if worst > 0.92 * margin:
                return False
        return True

    while half > 2 and not fits(half):
        half -= 1

    labels0 = np.zeros((nz, ny, nx), dtype=np.uint16)
    x0, x1 = int(round(vx - half)), int(round(vx + half))
    y0, y1 = int(round(vy - half)), int(round(vy + half))
    for lab, zc in enumerate(centers_z, start=1):
        zc0, zc1 = int(round(zc - hz)), int(round(zc + hz))
        labels0[max(zc0, 0) : min(zc1, nz), max(y0, 0) : min(y1, ny), max(x0, 0) : min(x1, nx)] = lab

    content0 = np.zeros((nz, ny, nx), dtype=np.float64)
    content0[body] = spec.body_intensity
    if spec.texture_amplitude > 0:
        # soft-tissue texture: bounded smooth variation that rides along
        # with the warp and gives the similarity term in-body signal.
        # Multiple scales so every pyramid level of a coarse-to-fine
        # registration sees matched-size structure.
        texture = np.zeros((nz, ny, nx), dtype=np.float64)
        for scale in (1.0, 2.0, 4.0):
            noise = _smooth3(rng.standard_normal((nz, ny, nx)), spec.texture_sigma * scale)
            peak = np.abs(noise).max()
            if peak > 0:
                texture += noise / (peak * 3.0)
        content0[body] += spec.texture_amplitude * texture[body]
    content0[labels0 > 0] = spec.vertebra_intensity
    content0 = np.clip(_smooth3(content0, spec.smooth_sigma), 0.0, 1.0)

    drifts = rng.normal(0.0, spec.drift_std, size=max(spec.n_timepoints - 1, 0))
    variation = spec.variation_params()
    body_mask0 = BodyMask(body)

    contents = [content0]
    labelmaps = [LabelMap(labels0)]
    bodies = [body]
    for t in range(1, spec.n_timepoints):
        params = derive_params(variation, 0x7B, patient_seed, t)
        field_t = simulate_dvf(spec.dims, params, mask=body_mask0)
        vol_t = warp_volume(Volume(content0.astype(np.float32)), field_t)
        scale = 1.0 + drifts[t - 1]
        contents.append(np.clip(vol_t.data.astype(np.float64) * scale, 0.0, 1.0))
        labelmaps.append(warp_labels(labelmaps[0], field_t))
        body_t = warp_labels(LabelMap(body.astype(np.uint16)), field_t)
        bodies.append(body_t.data.astype(bool))

    # Table slab: fixed across timepoints, strictly below every
    # timepoint's body so it never overlaps the body ground truth.
    min_body_y = min(int(np.argwhere(bd.any(axis=(0, 2))).min()) for bd in bodies)
    slab_y_hi = max(1, min_body_y - 1)
    table = np.zeros((nz, ny, nx), dtype=bool)
    table[:, 0:slab_y_hi, int(round(0.15 * nx)) : int(round(0.85 * nx))] = True
    for bd in bodies:
        table &= ~bd

    scans = []
    for t in range(spec.n_timepoints):
        vol = contents[t].copy()
        vol[table] = spec.table_intensity
        scans.append(
            PhantomScan(
                volume=Volume(vol.astype(np.float32)),
                labels=labelmaps[t],
                table_mask=table.copy(),
                body_mask=BodyMask(bodies[t]),
            )
        )
    return scans


def make_dataset(spec: PhantomSpec) -> list[tuple[str, list[PhantomScan]]]:
    """All patients of the spec, ids P00, P01, ..."""
    return [(f"P{p:02d}", make_patient(spec, p)) for p in range(spec.n_patients)]


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


def write_dataset(dataset: list[tuple[str, list[PhantomScan]]], out_dir: str, spec: PhantomSpec) -> str:
    """Write per-timepoint file pairs plus a manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "seed": spec.seed,
        "dims": list(spec.dims),
        "n_timepoints": spec.n_timepoints,
        "patients": [],
    }
    for patient_id, scans in dataset:
        entry = {"id": patient_id, "timepoints": []}
        for t, scan in enumerate(scans):
            prefix = f"{patient_id}_T{t}"
            img = f"{prefix}_img.vvol"
            lab = f"{prefix}_lab.lvol"
            bodyf = f"{prefix}_body.lvol"
            tablef = f"{prefix}_table.lvol"
            save_volume(scan.volume, os.path.join(out_dir, img))
            save_labels(scan.labels, os.path.join(out_dir, lab))
            save_labels(LabelMap(scan.body_mask.data.astype(np.uint16)), os.path.join(out_dir, bodyf))
            save_labels(LabelMap(scan.table_mask.astype(np.uint16)), os.path.join(out_dir, tablef))
            entry["timepoints"].append(
                {"img": img, "labels": lab, "body_mask": bodyf, "table_mask": tablef}
            )
        manifest["patients"].append(entry)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(in_dir: str) -> list[tuple[str, list[PhantomScan]]]:
    """Load a dataset directory written by :func:`write_dataset`."""
    path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"missing dataset manifest: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    dataset = []
    for entry in manifest["patients"]:
        scans = []
        for tp in entry["timepoints"]:
            volume = load_volume(os.path.join(in_dir, tp["img"]))
            labels = load_labels(os.path.join(in_dir, tp["labels"]))
            body = load_labels(os.path.join(in_dir, tp["body_mask"]))
            table = load_labels(os.path.join(in_dir, tp["table_mask"]))
            scans.append(
                PhantomScan(
                    volume=volume,
                    labels=labels,
                    table_mask=table.data.astype(bool),
                    body_mask=BodyMask(body.data.astype(bool)),
                )
            )
        dataset.append((entry["id"], scans))
    return dataset
