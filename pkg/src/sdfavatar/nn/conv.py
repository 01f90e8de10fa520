"""Small 2D convolution networks and bilinear feature sampling.

Feature maps are channels-last (B, H, W, C). Convolutions are 3x3, stride 1,
same padding, realized as numba im2col + batched matrix products; the input
gradient is computed as another 3x3 convolution with the flipped,
channel-swapped kernel (avoids numpy's slow small-contraction matmul shapes).
Two flavours:

- shared-weight nets (face triplane encoders): one kernel for the batch;
- grouped nets (per-node patch regressors): one kernel per batch entry,
  evaluated as a single batched matmul across all groups.

Optional per-layer resampling: 2x average-pool down or 2x nearest up.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numba import njit

from . import tape as ops
from .tape import Tape, Node, value_of, _is_node, _accum

RESAMPLE_NONE = 0
RESAMPLE_DOWN = 1  # 2x2 average pool after the conv
RESAMPLE_UP = 2  # 2x nearest-neighbor upsample after the conv


@dataclass
class ConvNetParams:
    """A chain of 3x3 conv layers with activations and a resample schedule.

    ``kernels[k]`` is (Cout, Cin, 3, 3) for shared nets or (N, Cout, Cin, 3, 3)
    for grouped nets; ``biases[k]`` is (Cout,) or (N, Cout).
    """

    kernels: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]
    resample: List[int]

    def __post_init__(self):
        for k in self.kernels:
            if k.shape[-2:] != (3, 3):
                raise ValueError("patch/encoder kernels must be 3x3")
        if not (len(self.kernels) == len(self.biases) == len(self.activations)
                == len(self.resample)):
            raise ValueError("layer lists must have equal length")

    @property
    def grouped(self) -> bool:
        return self.kernels[0].ndim == 5

    def named_arrays(self, prefix: str):
        for k, (w, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}.k{k}", w
            yield f"{prefix}.b{k}", b


def conv_net_init(rng: np.random.Generator, channels: List[int],
                  resample: Optional[List[int]] = None, groups: int = 0,
                  activation: str = "relu", final_activation: str = "none",
                  dtype=np.float32) -> ConvNetParams:
    kernels, biases, acts = [], [], []
    n_layers = len(channels) - 1
    resample = resample or [RESAMPLE_NONE] * n_layers
    for k in range(n_layers):
        cin, cout = channels[k], channels[k + 1]
        bound = np.sqrt(6.0 / (cin * 9 + cout * 9))
        shape = (groups, cout, cin, 3, 3) if groups else (cout, cin, 3, 3)
        kernels.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
        biases.append(np.zeros((groups, cout) if groups else cout, dtype=dtype))
        acts.append(activation if k < n_layers - 1 else final_activation)
    return ConvNetParams(kernels, biases, acts, list(resample))


@njit(cache=True)
def _im2col_kernel(xp, cols, h, w, cin):
    b = xp.shape[0]
    for n in range(b):
        for k in range(9):
            ky = k // 3
            kx = k % 3
            j0 = k * cin
            for y in range(h):
                for x in range(w):
                    p = y * w + x
                    for c in range(cin):
                        cols[n, p, j0 + c] = xp[n, y + ky, x + kx, c]
    return cols


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W, 9*C) patch matrix (tap-major columns)."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h * w, 9 * c), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col_kernel(xp, cols, h, w, c)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        # (B, H, W, C, 3, 3) -> tap-major (B, HW, 9C)
        cols = np.ascontiguousarray(
            win.transpose(0, 1, 2, 4, 5, 3)
        ).reshape(b, h * w, 9 * c)
    return cols


def _weight_matrix(kv: np.ndarray) -> np.ndarray:
    """Kernel (…, Cout, Cin, 3, 3) -> matmul layout (…, 9*Cin, Cout)."""
    if kv.ndim == 5:
        n, co, ci = kv.shape[:3]
        return np.ascontiguousarray(
            kv.transpose(0, 3, 4, 2, 1).reshape(n, 9 * ci, co))
    co, ci = kv.shape[:2]
    return np.ascontiguousarray(kv.transpose(2, 3, 1, 0).reshape(9 * ci, co))


def _flip_weight_matrix(kv: np.ndarray) -> np.ndarray:
    """Backward kernel: flip taps, swap in/out channels -> (…, 9*Cout, Cin)."""
    flipped = kv[..., ::-1, ::-1]
    if kv.ndim == 5:
        n, co, ci = kv.shape[:3]
        return np.ascontiguousarray(
            flipped.transpose(0, 3, 4, 1, 2).reshape(n, 9 * co, ci))
    co, ci = kv.shape[:2]
    return np.ascontiguousarray(flipped.transpose(2, 3, 0, 1).reshape(9 * co, ci))


def conv3x3(tape, x, kernel, bias):
    """One 3x3 same-padding conv on (B, H, W, Cin); kernel shared or grouped."""
    xv = value_of(x)
    kv = value_of(kernel)
    bv = value_of(bias)
    b_sz, h, w, cin = xv.shape
    grouped = kv.ndim == 5
    cols = _im2col(xv)  # (B, HW, 9*Cin)
    wmat = _weight_matrix(kv)
    cout = kv.shape[-4]
    if grouped:
        y = np.matmul(cols, wmat) + bv[:, None, :]
    else:
        big = cols.reshape(b_sz * h * w, 9 * cin) @ wmat  # true 2D BLAS path
        y = big.reshape(b_sz, h * w, cout) + bv
    out = y.reshape(b_sz, h, w, cout)
    if tape is None or not (_is_node(x) or _is_node(kernel) or _is_node(bias)):
        return out
    del cols  # recomputed in backward; keeps the tape's working set small

    def bwd(g):
        gy = g.reshape(b_sz, h * w, cout)
        if _is_node(bias):
            _accum(bias, gy.sum(axis=1) if grouped else gy.sum(axis=(0, 1)))
        if _is_node(kernel):
            # Recompute the patch matrix rather than retaining it: holding
            # tens of MB per layer on the tape causes page-fault churn.
            cols_b = _im2col(xv)
            if grouped:
                dwm = np.matmul(cols_b.transpose(0, 2, 1), gy)  # (N, 9Cin, Cout)
                dk = dwm.reshape(b_sz, 3, 3, cin, cout).transpose(0, 4, 3, 1, 2)
            else:
                dwm = cols_b.reshape(-1, 9 * cin).T @ gy.reshape(-1, cout)
                dk = dwm.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
            _accum(kernel, np.ascontiguousarray(dk))
        if _is_node(x):
            # Input gradient is a conv of gy with the flipped/swapped kernel.
            gcols = _im2col(g.reshape(b_sz, h, w, cout))
            wback = _flip_weight_matrix(kv)
            if grouped:
                dx = np.matmul(gcols, wback)
            else:
                dx = (gcols.reshape(-1, 9 * cout) @ wback).reshape(b_sz, h * w, cin)
            _accum(x, dx.reshape(xv.shape))

    return tape.record(out, bwd)


def avgpool2(tape, x):
    xv = value_of(x)
    b, h, w, c = xv.shape
    out = xv.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def dx(g):
        g4 = (g * 0.25)[:, :, None, :, None, :]
        return np.broadcast_to(g4, (b, h // 2, 2, w // 2, 2, c)).reshape(xv.shape)

    return ops._unary(tape, x, out, dx)


def upsample2(tape, x):
    xv = value_of(x)
    b, h, w, c = xv.shape
    out = np.broadcast_to(
        xv[:, :, None, :, None, :], (b, h, 2, w, 2, c)
    ).reshape(b, 2 * h, 2 * w, c)

    def dx(g):
        return g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))

    return ops._unary(tape, x, out.copy(), dx)


def conv_forward(params: ConvNetParams, x, tape: Optional[Tape] = None,
                 weight_nodes=None):
    """Full conv-net forward; ``x`` is (B, H, W, Cin) channels-last."""
    xv = value_of(x)
    k0 = value_of(weight_nodes[0][0]) if weight_nodes else params.kernels[0]
    cin = k0.shape[-3]
    if xv.shape[-1] != cin:
        raise ValueError(f"input has {xv.shape[-1]} channels, net expects {cin}")
    h = x
    for k, act in enumerate(params.activations):
        kern, bias = (weight_nodes[k] if weight_nodes is not None
                      else (params.kernels[k], params.biases[k]))
        h = conv3x3(tape, h, kern, bias)
        if act == "relu":
            h = ops.relu(tape, h)
        elif act == "elu":
            h = ops.elu(tape, h)
        if params.resample[k] == RESAMPLE_DOWN:
            h = avgpool2(tape, h)
        elif params.resample[k] == RESAMPLE_UP:
            h = upsample2(tape, h)
    return h


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(tape, grid, uv, grid_idx=None):
    """Sample channels-last feature maps bilinearly at continuous (u, v).

    ``grid``: (H, W, C) single map or (N, H, W, C) with ``grid_idx`` (P,)
    selecting the map per sample. ``uv``: (P, 2) in pixel units, u along
    width, v along height; out-of-range coordinates clamp to the border.
    Returns (P, C). Gradients flow into both the grid and the coordinates.
    """
    gv = value_of(grid)
    uvv = value_of(uv)
    single = gv.ndim == 3
    if single:
        gv4 = gv[None]
        gidx = np.zeros(len(uvv), dtype=np.int64)
    else:
        gv4 = gv
        gidx = np.asarray(grid_idx, dtype=np.int64)
    n, hh, ww, c = gv4.shape
    u = np.clip(uvv[:, 0], 0.0, ww - 1.0)
    v = np.clip(uvv[:, 1], 0.0, hh - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, ww - 1)
    v1 = np.minimum(v0 + 1, hh - 1)
    fu = (u - u0).astype(gv4.dtype)
    fv = (v - v0).astype(gv4.dtype)
    flat = gv4.reshape(n * hh * ww, c)
    i00 = (gidx * hh + v0) * ww + u0
    i01 = (gidx * hh + v0) * ww + u1
    i10 = (gidx * hh + v1) * ww + u0
    i11 = (gidx * hh + v1) * ww + u1
    f00, f01 = flat[i00], flat[i01]
    f10, f11 = flat[i10], flat[i11]
    w00 = ((1 - fu) * (1 - fv))[:, None]
    w01 = (fu * (1 - fv))[:, None]
    w10 = ((1 - fu) * fv)[:, None]
    w11 = (fu * fv)[:, None]
    out = f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11
    if tape is None or not (_is_node(grid) or _is_node(uv)):
        return out

    def bwd(g):
        if _is_node(grid):
            idx_all = np.concatenate([i00, i01, i10, i11])
            vals = np.concatenate([g * w00, g * w01, g * w10, g * w11], axis=0)
            plan = ops.ScatterPlan(idx_all, len(flat))
            dgrid = plan.apply(vals).reshape(gv4.shape)
            _accum(grid, dgrid if not single else dgrid[0])
        if _is_node(uv):
            inside_u = ((uvv[:, 0] > 0.0) & (uvv[:, 0] < ww - 1.0)).astype(gv4.dtype)
            inside_v = ((uvv[:, 1] > 0.0) & (uvv[:, 1] < hh - 1.0)).astype(gv4.dtype)
            dfu = ((f01 - f00) * (1 - fv)[:, None] + (f11 - f10) * fv[:, None])
            dfv = ((f10 - f00) * (1 - fu)[:, None] + (f11 - f01) * fu[:, None])
            du = (g * dfu).sum(axis=1) * inside_u
            dv = (g * dfv).sum(axis=1) * inside_v
            _accum(uv, np.stack([du, dv], axis=1))

    return tape.record(out, bwd)
