"""Volume rendering with the Laplace-CDF signed-distance-to-density transform.

Density is ``sigma(p) = (1/gamma) * CDF_Laplace(-sdf(p))``; rays are clipped
to the avatar bounds, sampled uniformly, and composited with standard
emission-absorption quadrature. Colors are only decoded where the quadrature
weight exceeds a small threshold; skipped samples contribute the background
(their weights are below the threshold by construction).
"""

from typing import Optional

import numpy as np

from ..nn import ops
from ..nn.tape import Tape, value_of
from ..counters import Counters

COLOR_WEIGHT_THRESHOLD = 1e-4


def sdf_to_density(s, gamma: float):
    """Pure-array density transform (works on ndarrays of any shape)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = np.asarray(s)
    a = 0.5 * np.exp(-np.abs(s) / gamma)
    phi_neg_s = np.where(s <= 0, 1.0 - a, a)  # CDF_gamma(-s)
    return phi_neg_s / gamma


def sdf_to_density_tape(tape, s, gamma: float):
    """Tape version of the density transform (differentiable w.r.t. s)."""
    sv = value_of(s)
    dt = sv.dtype.type
    neg_mask = (sv <= 0).astype(sv.dtype)
    a = ops.mul(tape, ops.exp(tape, ops.mul(tape, ops.absolute(tape, s),
                                            dt(-1.0 / gamma))), dt(0.5))
    # phi(-s) = neg_mask * (1 - a) + (1 - neg_mask) * a
    phi = ops.add(tape,
                  ops.mul(tape, ops.sub(tape, dt(1.0), a), neg_mask),
                  ops.mul(tape, a, (1.0 - neg_mask)))
    return ops.mul(tape, phi, dt(1.0 / gamma))


def clip_rays_to_bounds(origins: np.ndarray, dirs: np.ndarray, lo, hi):
    """Slab clip; returns (t_near, t_far) with t_far <= t_near where missed."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    tnear = np.nanmax(np.where(d != 0, np.minimum(t0, t1), -np.inf), axis=1)
    tfar = np.nanmin(np.where(d != 0, np.maximum(t0, t1), np.inf), axis=1)
    parallel_out = ((d == 0) & ((o < lo) | (o > hi))).any(axis=1)
    tnear = np.maximum(tnear, 0.0)
    tfar = np.where(parallel_out, tnear, tfar)
    return tnear, tfar


def volume_render(avatar, snapshot, origins: np.ndarray, dirs: np.ndarray,
                  gamma: float, n_samples: int = 64,
                  tape: Optional[Tape] = None, binding=None,
                  rng: Optional[np.random.Generator] = None,
                  background=(1.0, 1.0, 1.0),
                  counters: Optional[Counters] = None,
                  color_threshold: float = COLOR_WEIGHT_THRESHOLD,
                  sdf_fn=None, color_fn=None):
    """Render rays through the composed avatar field by quadrature.

    Returns a dict with ``rgb`` (R, 3), ``alpha`` (R,), ``depth`` (expected
    termination depth), and the per-sample ``weights``. Values are Nodes when
    a tape is supplied. ``sdf_fn``/``color_fn`` override the composed field
    (the trainer substitutes fused multi-frame evaluators).
    """
    counters = counters if counters is not None else Counters()
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    R = len(o)
    lo, hi = snapshot.bounds(avatar.body.node_set.influence_radius)
    tnear, tfar = clip_rays_to_bounds(o, d, lo, hi)
    valid = tfar > tnear + 1e-9
    dt_seg = np.where(valid, (tfar - tnear) / n_samples, 0.0)
    if rng is not None:
        offsets = rng.uniform(0.0, 1.0, size=(R, n_samples))
    else:
        offsets = np.full((R, n_samples), 0.5)
    t_samples = tnear[:, None] + dt_seg[:, None] * (np.arange(n_samples)[None, :] + offsets)
    pts = o[:, None, :] + d[:, None, :] * t_samples[..., None]
    flat_pts = pts.reshape(-1, 3)
    flat_dirs = np.repeat(d, n_samples, axis=0)

    if sdf_fn is not None:
        s = sdf_fn(flat_pts)
    else:
        s, _ = avatar.composed_sdf(flat_pts, snapshot, tape, binding,
                                   counters=counters)
    sigma = sdf_to_density_tape(tape, s, gamma)
    dtype = value_of(sigma).dtype
    dt_flat = np.repeat(dt_seg, n_samples).astype(dtype)
    tau = ops.mul(tape, sigma, dt_flat)  # optical depth per segment
    tau2 = ops.reshape(tape, tau, (R, n_samples))
    cum = ops.cumsum(tape, tau2, axis=1)
    cum_excl = ops.sub(tape, cum, tau2)  # exclusive prefix
    T = ops.exp(tape, ops.neg(tape, cum_excl))
    alpha_seg = ops.sub(tape, dtype.type(1.0), ops.exp(tape, ops.neg(tape, tau2)))
    weights = ops.mul(tape, T, alpha_seg)  # (R, S)
    w_val = value_of(weights)

    bg = np.asarray(background, dtype=dtype)
    need_color = (w_val > color_threshold).reshape(-1)
    counters.add("volume_samples", len(flat_pts))
    rgb_flat = np.broadcast_to(bg, (len(flat_pts), 3)).astype(dtype)
    if need_color.any():
        sel = np.nonzero(need_color)[0]
        if color_fn is not None:
            c_sel = color_fn(flat_pts[sel], flat_dirs[sel])
        else:
            c_sel, _ = avatar.composed_color(flat_pts[sel], flat_dirs[sel],
                                             snapshot, tape, binding,
                                             counters=counters)
        rgb_flat = ops.assign_rows(tape, rgb_flat, sel, c_sel)
    rgb_samples = ops.reshape(tape, rgb_flat, (R, n_samples, 3))
    w3 = ops.reshape(tape, weights, (R, n_samples, 1))
    rgb_fg = ops.sum_(tape, ops.mul(tape, rgb_samples, w3), axis=1)
    alpha = ops.sum_(tape, weights, axis=1)
    # Expected termination depth (normalize by alpha for hit rays).
    t_end = ops.sum_(tape, ops.mul(tape, weights, t_samples.astype(dtype)), axis=1)
    # Background fills the untransmitted remainder.
    rgb = ops.add(tape, rgb_fg,
                  ops.mul(tape, ops.reshape(tape, ops.sub(tape, dtype.type(1.0), alpha),
                                            (R, 1)), bg))
    return {
        "rgb": rgb,
        "alpha": alpha,
        "depth": t_end,
        "weights": weights,
        "t_near": tnear,
        "t_far": tfar,
        "valid": valid,
    }
