"""Iterative multi-resolution deformable registration.

Direct gradient descent on a dense displacement field, coarse to fine:
both images are downsampled per level, the field found at a coarse
level is upsampled (nearest-neighbor, displacement values doubled) to
initialize the next, and every step uses backtracking halving so the
per-level loss trace is monotone non-increasing. The objective is the
package's unsupervised loss with the smoothness weight interpreted per
voxel (scaled by 1/N at each level) so the similarity/regularity
tradeoff is resolution independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dvf import DisplacementField, warp_volume
from .errors import DataError, NumericError
from .loss import LossParams, _loss_arrays, per_voxel_lambda
from .volume import Volume, downsample2


@dataclass(frozen=True)
class IterRegConfig:
    levels: int = 3
    iters_per_level: tuple[int, ...] = (75, 100, 150)
    step_size: float = 1.0
    loss: LossParams = field(default_factory=LossParams)
    stop_tol: float = 1e-6
    max_halvings: int = 30

    def __post_init__(self):
        object.__setattr__(self, "iters_per_level", tuple(int(i) for i in self.iters_per_level))
        if self.levels < 1:
            raise DataError("levels must be >= 1")
        if len(self.iters_per_level) != self.levels:
            raise DataError("need one iteration budget per level")
        if any(i < 1 for i in self.iters_per_level):
            raise DataError("iteration budgets must be positive")
        if self.stop_tol <= 0 or self.step_size <= 0:
            raise DataError("step_size and stop_tol must be > 0")


@dataclass(frozen=True)
class TraceRow:
    level: int
    iteration: int
    loss: float
    step_size: float


@dataclass(frozen=True)
class IterRegResult:
    field: DisplacementField
    warped: Volume
    elapsed_ms: float
    trace: tuple[TraceRow, ...]


def _upsample_field(u: np.ndarray) -> np.ndarray:
    up = u.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    return up * 2.0


def register_iterative(fixed: Volume, moving: Volume, cfg: IterRegConfig = IterRegConfig()) -> IterRegResult:
    """Multi-resolution gradient descent registration of moving onto fixed.

    Steps move the field along the normalized gradient (step size in
    voxels); a step is halved until the loss decreases, and a level ends
    when the relative improvement drops below stop_tol, the halving
    budget is exhausted, or the iteration cap is reached.
    """
    if fixed.dims != moving.dims:
        raise DataError(f"dims mismatch: {fixed.dims} vs {moving.dims}")
    div = 2 ** (cfg.levels - 1)
    if any(n % div for n in fixed.dims):
        raise DataError(f"dims {fixed.dims} must be divisible by {div}")

    start = time.perf_counter()
    pyramid = [(fixed, moving)]
    for _ in range(cfg.levels - 1):
        pf, pm = pyramid[-1]
        pyramid.append((downsample2(pf), downsample2(pm)))
    pyramid.reverse()  # coarsest first

    trace: list[TraceRow] = []
    u = None
    for level, (pf, pm) in enumerate(pyramid):
        farr = pf.data.astype(np.float64)
        marr = pm.data.astype(np.float64)
        if u is None:
            nz, ny, nx = farr.shape
            u = np.zeros((3, nz, ny, nx), dtype=np.float64)
        params = per_voxel_lambda(cfg.loss, farr.size)
        loss, grad = _loss_arrays(farr, marr, u, params, want_grad=True)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at level {level} start")
        step = cfg.step_size
        for it in range(cfg.iters_per_level[level]):
            gmax = np.abs(grad).max()
            if gmax == 0.0:
                trace.append(TraceRow(level, it, loss, step))
                break
            direction = grad / gmax
            accepted = False
            for _ in range(cfg.max_halvings):
                cand = u - step * direction
                cand_loss, cand_grad = _loss_arrays(farr, marr, cand, params, want_grad=True)
                if np.isfinite(cand_loss) and cand_loss < loss:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                trace.append(TraceRow(level, it, loss, step))
                break
            rel_change = (loss - cand_loss) / max(abs(loss), 1e-12)
            u, loss, grad = cand, cand_loss, cand_grad
            trace.append(TraceRow(level, it, loss, step))
            if rel_change < cfg.stop_tol:
                break
        if level + 1 < len(pyramid):
            u = _upsample_field(u)

    est = DisplacementField(u.astype(np.float32))
    warped = warp_volume(moving, est)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    return IterRegResult(field=est, warped=warped, elapsed_ms=elapsed_ms, trace=tuple(trace))
