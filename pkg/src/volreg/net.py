"""Encoder-decoder registration network with hand-written backpropagation.

The network maps a fixed/moving pair, concatenated into a two-channel 3D
image, to a dense displacement field in voxel units. The encoder is a
stack of stride-2 3x3x3 convolutions, each followed by a leaky ReLU; the
decoder alternates 3x3x3 convolutions with nearest-neighbor x2
upsampling and skip concatenation from the matching encoder level, then
refines at full resolution; a final 3-channel convolution emits the
flow. Forward, backward, and the Adam update are implemented directly
on numpy arrays so gradients can be checked against finite differences.

Activations use arrays of shape (channels, nz, ny, nx) and inherit the
parameter dtype (float32 in production, float64 for gradient checks).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dvf import DisplacementField, warp_volume
from .errors import DataError
from .loss import LossParams, _loss_arrays
from .volume import Triple, Volume


@dataclass(frozen=True)
class RegNetConfig:
    """Architecture settings; kernel 3 and encoder stride 2 are fixed.

    Input dims must be divisible by 2 ** len(enc_filters). The first
    len(enc_filters) decoder convolutions are up-blocks (conv, leaky
    ReLU, x2 upsample, skip concat); the remaining ones refine at full
    resolution.
    """

    enc_filters: tuple[int, ...] = (16, 32, 32, 32)
    dec_filters: tuple[int, ...] = (32, 32, 32, 32, 32, 16, 16)
    leaky_alpha: float = 0.5
    kernel: int = 3
    enc_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "enc_filters", tuple(int(f) for f in self.enc_filters))
        object.__setattr__(self, "dec_filters", tuple(int(f) for f in self.dec_filters))
        if self.kernel != 3 or self.enc_stride != 2:
            raise DataError("kernel size 3 and encoder stride 2 are fixed")
        if any(f < 1 for f in self.enc_filters + self.dec_filters):
            raise DataError("all filter counts must be >= 1")
        if len(self.dec_filters) < len(self.enc_filters):
            raise DataError("need at least one decoder conv per encoder level")

    def check_dims(self, dims: Triple) -> None:
        div = 2 ** len(self.enc_filters)
        if any(n % div for n in dims):
            raise DataError(f"dims {dims} must be divisible by {div}")

    def layer_channels(self) -> list[tuple[str, int, int]]:
        """(name, c_in, c_out) for every convolution, in forward order."""
        layers = []
        c = 2
        enc_outs = [2]
        for i, f in enumerate(self.enc_filters):
            layers.append((f"enc{i}", c, f))
            c = f
            enc_outs.append(f)
        n_enc = len(self.enc_filters)
        for j, f in enumerate(self.dec_filters):
            layers.append((f"dec{j}", c, f))
            c = f
            if j < n_enc:
                c += enc_outs[n_enc - 1 - j]  # skip concat after upsampling
        layers.append(("flow", c, 3))
        return layers


@dataclass
class RegNetParams:
    """All learnable tensors plus the config and init seed."""

    cfg: RegNetConfig
    seed: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def astype(self, dtype) -> "RegNetParams":
        return RegNetParams(
            cfg=self.cfg,
            seed=self.seed,
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
        )

    def copy(self) -> "RegNetParams":
        return RegNetParams(
            cfg=self.cfg,
            seed=self.seed,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_params(cfg: RegNetConfig, seed: int = 0) -> RegNetParams:
    """He-style initialization: W ~ N(0, 2 / fan_in), zero biases.

    The final flow convolution is scaled down by 1e-2 so the initial
    field is near zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4E7)))
    weights, biases = [], []
    for name, c_in, c_out in cfg.layer_channels():
        fan_in = c_in * 27
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(c_out, c_in, 3, 3, 3)).astype(np.float32)
        if name == "flow":
            w *= 1e-2
        weights.append(w)
        biases.append(np.zeros(c_out, dtype=np.float32))
    return RegNetParams(cfg=cfg, seed=seed, weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """3x3x3 convolution, padding 1. x: (C, D, H, W) -> (O, D/s, H/s, W/s)."""
    c, d, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    _, od, oh, ow = win.shape[:4]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(od * oh * ow, c * 27)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += b
    return out.T.reshape(w.shape[0], od, oh, ow)


def _conv3d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of _conv3d w.r.t. input, weights, and bias."""
    c = x.shape[0]
    o, od, oh, ow = grad_out.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    go_flat = grad_out.reshape(o, -1)
    wt = w.reshape(o, c, 27)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                patch = xp[
                    :,
                    i : i + stride * od : stride,
                    j : j + stride * oh : stride,
                    k : k + stride * ow : stride,
                ]
                dw[:, :, i, j, k] = go_flat @ patch.reshape(c, -1).T
                tap = i * 9 + j * 3 + k
                contrib = (wt[:, :, tap].T @ go_flat).reshape(c, od, oh, ow)
                dxp[
                    :,
                    i : i + stride * od : stride,
                    j : j + stride * oh : stride,
                    k : k + stride * ow : stride,
                ] += contrib
    db = go_flat.sum(axis=1)
    return dxp[:, 1:-1, 1:-1, 1:-1], dw, db


def _leaky(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, x, alpha * x)


def _leaky_backward(x: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0, grad, alpha * grad)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def _upsample2_backward(grad: np.ndarray) -> np.ndarray:
    c, d, h, w = grad.shape
    return grad.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(2, 4, 6))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Activation record retained for backpropagation."""

    inputs: list[np.ndarray] = field(default_factory=list)  # conv inputs per layer
    pre_act: list[np.ndarray] = field(default_factory=list)  # conv outputs pre-leaky
    skips: list[np.ndarray] = field(default_factory=list)  # encoder outputs incl. input
    flow: np.ndarray | None = None


def _forward_arrays(params: RegNetParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.cfg
    cache = ForwardCache()
    n_enc = len(cfg.enc_filters)
    n_dec = len(cfg.dec_filters)
    cache.skips.append(x)
    li = 0
    for _ in range(n_enc):
        cache.inputs.append(x)
        z = _conv3d(x, params.weights[li], params.biases[li], stride=2)
        cache.pre_act.append(z)
        x = _leaky(z, cfg.leaky_alpha)
        cache.skips.append(x)
        li += 1
    for j in range(n_dec):
        cache.inputs.append(x)
        z = _conv3d(x, params.weights[li], params.biases[li], stride=1)
        cache.pre_act.append(z)
        x = _leaky(z, cfg.leaky_alpha)
        if j < n_enc:
            x = _upsample2(x)
            x = np.concatenate([x, cache.skips[n_enc - 1 - j]], axis=0)
        li += 1
    cache.inputs.append(x)
    flow = _conv3d(x, params.weights[li], params.biases[li], stride=1)
    cache.flow = flow
    return flow, cache


def _backward_arrays(
    params: RegNetParams, cache: ForwardCache, d_flow: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    cfg = params.cfg
    n_enc = len(cfg.enc_filters)
    n_dec = len(cfg.dec_filters)
    d_weights = [None] * len(params.weights)
    d_biases = [None] * len(params.biases)

    li = n_enc + n_dec  # flow conv index
    grad, dw, db = _conv3d_backward(cache.inputs[li], params.weights[li], d_flow, stride=1)
    d_weights[li], d_biases[li] = dw, db

    d_skips = [np.zeros_like(s) for s in cache.skips]
    for j in range(n_dec - 1, -1, -1):
        li = n_enc + j
        if j < n_enc:
            skip = cache.skips[n_enc - 1 - j]
            c_skip = skip.shape[0]
            d_skips[n_enc - 1 - j] += grad[-c_skip:]
            grad = _upsample2_backward(grad[:-c_skip])
        grad = _leaky_backward(cache.pre_act[li], grad, cfg.leaky_alpha)
        grad, dw, db = _conv3d_backward(cache.inputs[li], params.weights[li], grad, stride=1)
        d_weights[li], d_biases[li] = dw, db

    for i in range(n_enc - 1, -1, -1):
        grad = grad + d_skips[i + 1]
        grad = _leaky_backward(cache.pre_act[i], grad, cfg.leaky_alpha)
        grad, dw, db = _conv3d_backward(cache.inputs[i], params.weights[i], grad, stride=2)
        d_weights[i], d_biases[i] = dw, db
    return d_weights, d_biases


def forward(
    params: RegNetParams, fixed: Volume, moving: Volume
) -> tuple[DisplacementField, ForwardCache]:
    """Estimate the displacement field for a fixed/moving pair."""
    if fixed.dims != moving.dims:
        raise DataError(f"dims mismatch: {fixed.dims} vs {moving.dims}")
    params.cfg.check_dims(fixed.dims)
    dtype = params.dtype
    x = np.stack([fixed.data, moving.data]).astype(dtype)
    flow, cache = _forward_arrays(params, x)
    return DisplacementField(flow.astype(np.float32)), cache


def backward(
    cache: ForwardCache,
    fixed: Volume,
    moving: Volume,
    params: RegNetParams,
    loss_params: LossParams = LossParams(),
) -> tuple[list[np.ndarray], float]:
    """Loss and its gradients w.r.t. every parameter tensor.

    Returns (grads, loss) where grads interleaves weight and bias
    gradients in the order of ``params.flat()``. The loss gradient with
    respect to the flow chains through the warp via the analytic field
    gradient, then backpropagates through the network.
    """
    if cache.flow is None:
        raise DataError("stale cache: run forward first")
    loss, d_flow = _loss_arrays(
        fixed.data.astype(np.float64),
        moving.data.astype(np.float64),
        cache.flow.astype(np.float64),
        loss_params,
        want_grad=True,
    )
    d_weights, d_biases = _backward_arrays(params, cache, d_flow.astype(params.dtype))
    grads = []
    for dw, db in zip(d_weights, d_biases):
        grads.append(dw)
        grads.append(db)
    return grads, float(loss)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: RegNetParams) -> "AdamState":
        flat = params.flat()
        return cls(m=[np.zeros_like(p) for p in flat], v=[np.zeros_like(p) for p in flat])


def adam_step(
    params: RegNetParams,
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[RegNetParams, AdamState]:
    """One Adam update; returns new params and state (inputs untouched)."""
    flat = params.flat()
    if len(grads) != len(flat):
        raise DataError(f"expected {len(flat)} gradient tensors, got {len(grads)}")
    t = state.t + 1
    new_m, new_v, new_flat = [], [], []
    for p, g, m, v in zip(flat, grads, state.m, state.v):
        g = g.astype(p.dtype)
        m2 = beta1 * m + (1 - beta1) * g
        v2 = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m2 / (1 - beta1**t)
        v_hat = v2 / (1 - beta2**t)
        new_flat.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype))
        new_m.append(m2)
        new_v.append(v2)
    weights = new_flat[0::2]
    biases = new_flat[1::2]
    return (
        RegNetParams(cfg=params.cfg, seed=params.seed, weights=weights, biases=biases),
        AdamState(m=new_m, v=new_v, t=t),
    )


def register_net(
    params: RegNetParams, fixed: Volume, moving: Volume
) -> tuple[DisplacementField, Volume, float]:
    """Single forward pass plus warp; returns (field, warped, elapsed_ms)."""
    start = time.perf_counter()
    flow, _cache = forward(params, fixed, moving)
    warped = warp_volume(moving, flow)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    return flow, warped, elapsed_ms


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: RegNetParams, out_dir: str, extra: dict | None = None) -> None:
    """Write manifest.json plus a params.raw payload; round-trips bit-exactly."""
    os.makedirs(out_dir, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in _named_tensors(params):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "config": {
            "enc_filters": list(params.cfg.enc_filters),
            "dec_filters": list(params.cfg.dec_filters),
            "leaky_alpha": params.cfg.leaky_alpha,
            "kernel": params.cfg.kernel,
            "enc_stride": params.cfg.enc_stride,
        },
        "seed": params.seed,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "params.raw"), "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(in_dir: str) -> RegNetParams:
    man_path = os.path.join(in_dir, "manifest.json")
    raw_path = os.path.join(in_dir, "params.raw")
    if not os.path.exists(man_path) or not os.path.exists(raw_path):
        raise DataError(f"missing checkpoint files in {in_dir}")
    with open(man_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = RegNetConfig(
        enc_filters=tuple(manifest["config"]["enc_filters"]),
        dec_filters=tuple(manifest["config"]["dec_filters"]),
        leaky_alpha=manifest["config"]["leaky_alpha"],
    )
    payload = np.fromfile(raw_path, dtype="<f4")
    params = init_params(cfg, seed=manifest["seed"])
    named = dict(_iter_manifest_arrays(manifest, payload))
    weights, biases = [], []
    for idx, (name, _c_in, _c_out) in enumerate(cfg.layer_channels()):
        w = named[f"{name}.w"]
        b = named[f"{name}.b"]
        if w.shape != params.weights[idx].shape or b.shape != params.biases[idx].shape:
            raise DataError(f"checkpoint tensor {name} has unexpected shape")
        weights.append(w)
        biases.append(b)
    return RegNetParams(cfg=cfg, seed=manifest["seed"], weights=weights, biases=biases)


def _named_tensors(params: RegNetParams):
    for idx, (name, _c_in, _c_out) in enumerate(params.cfg.layer_channels()):
        yield f"{name}.w", params.weights[idx]
        yield f"{name}.b", params.biases[idx]


def _iter_manifest_arrays(manifest: dict, payload: np.ndarray):
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"] // 4
        chunk = payload[start : start + count]
        if chunk.size != count:
            raise DataError(f"checkpoint payload truncated at tensor {entry['name']}")
        yield entry["name"], chunk.reshape(shape).astype(np.float32)
