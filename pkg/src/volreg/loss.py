"""Unsupervised registration loss and its analytic gradient.

The similarity term is a windowed squared normalized cross-correlation
between the fixed image and the warped moving image, averaged over all
voxels; the regularizer is the sum of squared forward differences of the
displacement field. The total loss is

    L(F, M; u) = -NCC(F, warp(M, u)) + lam * smoothness(u)

``loss_grad_field`` returns the exact gradient of L with respect to
every displacement component, chaining the NCC derivative through the
trilinear interpolation weights. All reductions run in float64.

Windows are clipped at the volume border and divided by the actual
clipped window size; a window whose sum of squared deviations falls
below ``epsilon`` (for either image) contributes a zero term.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .dvf import DisplacementField, _trilinear
from .errors import DataError
from .volume import Volume


@dataclass(frozen=True)
class LossParams:
    """omega: window edge length (odd); lam: smoothness weight; epsilon: variance guard."""

    omega: int = 9
    lam: float = 1.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.omega < 1 or self.omega % 2 == 0:
            raise DataError(f"omega must be odd and >= 1, got {self.omega}")
        if self.lam < 0:
            raise DataError("lam must be >= 0")
        if self.epsilon <= 0:
            raise DataError("epsilon must be > 0")


def per_voxel_lambda(params: LossParams, n_voxels: int) -> LossParams:
    """Interpret ``lam`` as a per-voxel weight against the summed regularizer.

    The similarity score is a mean while the regularizer is a sum, so a
    resolution-independent tradeoff needs lam scaled by 1/N; training and
    the iterative optimizer use this so lam = 1.0 transfers across grids.
    """
    return replace(params, lam=params.lam / float(n_voxels))


# ---------------------------------------------------------------------------
# Clipped box sums
# ---------------------------------------------------------------------------


def _box_sum_axis(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    p = np.cumsum(a, axis=axis, dtype=np.float64)
    zero = np.zeros_like(np.take(p, [0], axis=axis))
    p = np.concatenate([zero, p], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + radius, n - 1) + 1
    lo = np.maximum(idx - radius, 0)
    return np.take(p, hi, axis=axis) - np.take(p, lo, axis=axis)


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    for axis in range(out.ndim):
        out = _box_sum_axis(out, radius, axis)
    return out


def _box_count(shape, radius: int) -> np.ndarray:
    axes = []
    for n in shape:
        idx = np.arange(n)
        axes.append(
            (np.minimum(idx + radius, n - 1) - np.maximum(idx - radius, 0) + 1).astype(
                np.float64
            )
        )
    cz, cy, cx = axes
    return cz[:, None, None] * cy[None, :, None] * cx[None, None, :]


# ---------------------------------------------------------------------------
# Local means and NCC
# ---------------------------------------------------------------------------


def local_means(v: Volume, omega: int = 9) -> Volume:
    """Mean over the omega^3 window clipped to the volume at every voxel."""
    if omega < 1 or omega % 2 == 0:
        raise DataError(f"omega must be odd and >= 1, got {omega}")
    r = omega // 2
    sums = _box_sum(v.data, r)
    counts = _box_count(v.data.shape, r)
    return Volume((sums / counts).astype(np.float32), v.spacing)


class _NccFields(NamedTuple):
    n: np.ndarray
    mean_f: np.ndarray
    mean_w: np.ndarray
    cov: np.ndarray
    var_f: np.ndarray
    var_w: np.ndarray
    valid: np.ndarray
    term: np.ndarray


def _ncc_fields(farr: np.ndarray, warr: np.ndarray, omega: int, eps: float) -> _NccFields:
    r = omega // 2
    n = _box_count(farr.shape, r)
    s_f = _box_sum(farr, r)
    s_w = _box_sum(warr, r)
    cov = _box_sum(farr * warr, r) - s_f * s_w / n
    var_f = _box_sum(farr * farr, r) - s_f * s_f / n
    var_w = _box_sum(warr * warr, r) - s_w * s_w / n
    valid = (var_f >= eps) & (var_w >= eps)
    term = np.zeros_like(cov)
    np.divide(cov * cov, var_f * var_w, out=term, where=valid)
    np.minimum(term, 1.0, out=term)
    return _NccFields(n, s_f / n, s_w / n, cov, var_f, var_w, valid, term)


class NccResult(NamedTuple):
    score: float
    term_map: Volume


def ncc(f: Volume, w: Volume, params: LossParams = LossParams()) -> NccResult:
    """Windowed squared cross-correlation; score is the mean per-voxel term.

    Every term lies in [0, 1]; windows with near-zero variance in either
    image contribute 0.
    """
    if f.dims != w.dims:
        raise DataError(f"dims mismatch: {f.dims} vs {w.dims}")
    fields = _ncc_fields(
        f.data.astype(np.float64), w.data.astype(np.float64), params.omega, params.epsilon
    )
    score = float(fields.term.mean())
    return NccResult(score, Volume(fields.term.astype(np.float32), f.spacing))


def _ncc_backward_w(fields: _NccFields, farr: np.ndarray, warr: np.ndarray, omega: int):
    """d(sum of per-voxel terms)/dW via the adjoint clipped box sum."""
    r = omega // 2
    alpha = np.zeros_like(fields.cov)
    beta = np.zeros_like(fields.cov)
    np.divide(2.0 * fields.cov, fields.var_f * fields.var_w, out=alpha, where=fields.valid)
    np.divide(
        2.0 * fields.cov**2,
        fields.var_f * fields.var_w**2,
        out=beta,
        where=fields.valid,
    )
    return (
        farr * _box_sum(alpha, r)
        - _box_sum(alpha * fields.mean_f, r)
        - warr * _box_sum(beta, r)
        + _box_sum(beta * fields.mean_w, r)
    )


# ---------------------------------------------------------------------------
# Smoothness
# ---------------------------------------------------------------------------


def smoothness(field: DisplacementField) -> float:
    """Sum of squared forward differences over all component-axis pairs."""
    u = field.u.astype(np.float64)
    return _smoothness_arr(u)


def _smoothness_arr(u: np.ndarray) -> float:
    total = 0.0
    for axis in (1, 2, 3):
        d = np.diff(u, axis=axis)
        total += float(np.sum(d * d))
    return total


def _smoothness_grad_arr(u: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(u)
    for axis in (1, 2, 3):
        d = np.diff(u, axis=axis)
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        grad[tuple(head)] += 2.0 * d
        grad[tuple(tail)] -= 2.0 * d
    return grad


# ---------------------------------------------------------------------------
# Total loss and gradient
# ---------------------------------------------------------------------------


def _loss_arrays(
    farr: np.ndarray,
    marr: np.ndarray,
    u: np.ndarray,
    params: LossParams,
    want_grad: bool,
):
    """Fused loss evaluation on float64 arrays; optionally with d(loss)/du."""
    nz, ny, nx = farr.shape
    n_vox = farr.size
    gz, gy, gx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    raw_x = gx + u[0]
    raw_y = gy + u[1]
    raw_z = gz + u[2]
    cx = np.clip(raw_x, 0.0, nx - 1.0)
    cy = np.clip(raw_y, 0.0, ny - 1.0)
    cz = np.clip(raw_z, 0.0, nz - 1.0)
    if want_grad:
        warr, dwx, dwy, dwz = _trilinear(marr, cx, cy, cz, with_grad=True)
    else:
        warr = _trilinear(marr, cx, cy, cz)
    fields = _ncc_fields(farr, warr, params.omega, params.epsilon)
    score = float(fields.term.mean())
    smooth = _smoothness_arr(u)
    loss = -score + params.lam * smooth
    if not want_grad:
        return loss, None
    dsum_dw = _ncc_backward_w(fields, farr, warr, params.omega)
    scale = -1.0 / n_vox
    grad = np.empty_like(u)
    grad[0] = scale * dsum_dw * dwx * ((raw_x >= 0.0) & (raw_x <= nx - 1.0))
    grad[1] = scale * dsum_dw * dwy * ((raw_y >= 0.0) & (raw_y <= ny - 1.0))
    grad[2] = scale * dsum_dw * dwz * ((raw_z >= 0.0) & (raw_z <= nz - 1.0))
    if params.lam != 0.0:
        grad += params.lam * _smoothness_grad_arr(u)
    return loss, grad


def total_loss(
    f: Volume, m: Volume, field: DisplacementField, params: LossParams = LossParams()
) -> float:
    """L = -ncc(F, warp(M, u)).score + lam * smoothness(u)."""
    _check_dims(f, m, field)
    loss, _ = _loss_arrays(
        f.data.astype(np.float64),
        m.data.astype(np.float64),
        field.u.astype(np.float64),
        params,
        want_grad=False,
    )
    return loss


def loss_grad_field(
    f: Volume, m: Volume, field: DisplacementField, params: LossParams = LossParams()
) -> np.ndarray:
    """Exact gradient of :func:`total_loss` w.r.t. every displacement component.

    Returns a float64 array of shape (3, nz, ny, nx) in (ux, uy, uz) order.
    """
    _check_dims(f, m, field)
    _, grad = _loss_arrays(
        f.data.astype(np.float64),
        m.data.astype(np.float64),
        field.u.astype(np.float64),
        params,
        want_grad=True,
    )
    return grad


def loss_value_and_grad(
    f: Volume, m: Volume, field: DisplacementField, params: LossParams = LossParams()
) -> tuple[float, np.ndarray]:
    """Fused path used by optimizers: one warp, both value and gradient."""
    _check_dims(f, m, field)
    loss, grad = _loss_arrays(
        f.data.astype(np.float64),
        m.data.astype(np.float64),
        field.u.astype(np.float64),
        params,
        want_grad=True,
    )
    return loss, grad


def _check_dims(f: Volume, m: Volume, field: DisplacementField) -> None:
    if f.dims != m.dims:
        raise DataError(f"dims mismatch: fixed {f.dims} vs moving {m.dims}")
    if f.dims != field.dims:
        raise DataError(f"dims mismatch: volumes {f.dims} vs field {field.dims}")
