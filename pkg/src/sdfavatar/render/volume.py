"""Deferred pipeline steps I and II: SDF volume reconstruction and raycasting.

Step I bakes the body field into a coarse 128^3 grid (2 cm voxels) by
node-bucketed batched evaluation, then refines the hand/face boxes at 4x
resolution (5 mm voxels) with the fully composed SDF. Step II sphere-traces
the two-level grid with trilinear interpolation and secant refinement.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit
from scipy import ndimage

from ..geom.camera import Camera, generate_all_rays
from ..counters import Counters

HIT_NONE = -1
SANE_NODE_BOUND = 10.0  # meters; poses flinging nodes past this are rejected


@dataclass
class FineBlock:
    origin: np.ndarray  # world position of voxel (0,0,0) center
    voxel: float
    values: np.ndarray  # (nx, ny, nz) float32
    part: int


@dataclass
class SdfVolume:
    origin: np.ndarray
    voxel: float
    values: np.ndarray  # (nx, ny, nz) float32 coarse grid
    fine_blocks: List[FineBlock] = field(default_factory=list)
    token: str = ""
    covered_voxels: int = 0
    fine_voxels: int = 0

    @property
    def dims(self) -> np.ndarray:
        return np.array(self.values.shape)

    def bounds(self):
        lo = self.origin - 0.5 * self.voxel
        hi = self.origin + (self.dims - 0.5) * self.voxel
        return lo, hi


def _voxel_centers(origin, voxel, idx):
    return origin + idx * voxel


def reconstruct_sdf_volume(avatar, snapshot, config, counters: Optional[Counters] = None,
                           shell_width: float = 0.06) -> SdfVolume:
    """Bake the avatar geometry into a coarse grid + fine part blocks.

    The coarse grid holds only the body field (node-bucketed evaluation with
    the conservative fallback elsewhere); the hand/face boxes are then
    refined at ``fine_factor`` x with the composed SDF, evaluated within
    ``shell_width`` of the coarse surface estimate and upsampled outside it.
    """
    counters = counters if counters is not None else Counters()
    res = config.coarse_resolution
    voxel = config.coarse_voxel
    n_posed = snapshot.body_state.n_posed_value
    if np.abs(n_posed).max() > SANE_NODE_BOUND:
        raise ValueError("pose places nodes outside the sane working bound")
    center = 0.5 * (n_posed.min(axis=0) + n_posed.max(axis=0))
    origin = center - (res / 2 - 0.5) * voxel
    values = np.empty((res, res, res), dtype=np.float32)

    # Node-bucketed voxel assignment: every voxel within a node's influence
    # radius is evaluated through that node's local network.
    radius = avatar.body.node_set.influence_radius
    r_vox = int(np.ceil(radius / voxel))
    pair_voxels = []
    pair_nodes = []
    for i, n in enumerate(n_posed):
        ijk = np.round((n - origin) / voxel).astype(np.int64)
        lo = np.maximum(ijk - r_vox, 0)
        hi = np.minimum(ijk + r_vox + 1, res)
        if (hi <= lo).any():
            continue
        gx, gy, gz = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        centers = _voxel_centers(origin, voxel, idx)
        d2 = ((centers - n) ** 2).sum(axis=1)
        keep = d2 <= radius * radius
        flat = (idx[keep, 0] * res + idx[keep, 1]) * res + idx[keep, 2]
        pair_voxels.append(flat)
        pair_nodes.append(np.full(keep.sum(), i, dtype=np.int64))
    pair_voxels = np.concatenate(pair_voxels)
    pair_nodes = np.concatenate(pair_nodes)
    covered_flat, inverse = np.unique(pair_voxels, return_inverse=True)
    cov_idx = np.stack(np.unravel_index(covered_flat, (res, res, res)), axis=1)
    cov_centers = _voxel_centers(origin, voxel, cov_idx)

    from ..fields.body import NodeBuckets
    bk = NodeBuckets.__new__(NodeBuckets)
    bk.points = cov_centers
    bk.pt_idx = inverse.astype(np.int64)
    bk.node_idx = pair_nodes
    bk._finalize(len(cov_centers), avatar.body.config.n_nodes)
    counters.add("bake_coarse_voxels", len(cov_centers))
    sdf_cov, _ = avatar.body.sdf(cov_centers, snapshot.body_state, bk=bk,
                                 fallback=np.zeros(len(cov_centers), dtype=np.float32),
                                 counters=counters)

    # Fallback for uncovered voxels: distance to the nearest node minus the
    # influence radius (safe for empty-space skipping), via a distance
    # transform against node-occupied voxels.
    occupied = np.zeros((res, res, res), dtype=bool)
    nijk = np.clip(np.round((n_posed - origin) / voxel).astype(np.int64), 0, res - 1)
    occupied[nijk[:, 0], nijk[:, 1], nijk[:, 2]] = True
    edt = ndimage.distance_transform_edt(~occupied, sampling=voxel)
    half_diag = voxel * np.sqrt(3.0) * 0.5
    np.copyto(values, (edt - half_diag - radius).astype(np.float32))
    values.reshape(-1)[covered_flat] = np.asarray(sdf_cov, dtype=np.float32)

    vol = SdfVolume(origin=origin, voxel=voxel, values=values,
                    token=snapshot.token, covered_voxels=len(cov_centers))

    if snapshot.parts_enabled:
        factor = config.fine_factor
        fine_voxel = voxel / factor
        for part, (blo, bhi) in snapshot.geometry.part_boxes.items():
            lo_idx = np.floor((blo - origin) / voxel).astype(np.int64)
            hi_idx = np.ceil((bhi - origin) / voxel).astype(np.int64) + 1
            lo_idx = np.clip(lo_idx, 0, res - 1)
            hi_idx = np.clip(hi_idx, 1, res)
            dims = (hi_idx - lo_idx) * factor
            f_origin = origin + lo_idx * voxel - 0.5 * voxel + 0.5 * fine_voxel
            gx, gy, gz = np.mgrid[0:dims[0], 0:dims[1], 0:dims[2]]
            idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
            centers = f_origin + idx * fine_voxel
            # Seed with the interpolated coarse field; refine near the surface.
            coarse_interp = sample_volume(vol, centers)
            fine_vals = coarse_interp.astype(np.float32)
            shell = np.abs(coarse_interp) < shell_width
            if shell.any():
                s_comp, _ = avatar.composed_sdf(centers[shell], snapshot,
                                                counters=counters)
                fine_vals[shell] = np.asarray(s_comp, dtype=np.float32)
            counters.add("bake_fine_voxels", int(shell.sum()))
            vol.fine_blocks.append(FineBlock(
                origin=f_origin, voxel=fine_voxel,
                values=fine_vals.reshape(tuple(dims)), part=part))
            vol.fine_voxels += int(shell.sum())
    return vol


# ---------------------------------------------------------------------------
# Trilinear sampling over (coarse + fine blocks)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _trilinear(values, origin_x, origin_y, origin_z, voxel, px, py, pz):
    nx, ny, nz = values.shape
    gx = (px - origin_x) / voxel
    gy = (py - origin_y) / voxel
    gz = (pz - origin_z) / voxel
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gz < 0.0:
        gz = 0.0
    if gx > nx - 1.0:
        gx = nx - 1.0
    if gy > ny - 1.0:
        gy = ny - 1.0
    if gz > nz - 1.0:
        gz = nz - 1.0
    x0 = int(gx)
    y0 = int(gy)
    z0 = int(gz)
    x1 = min(x0 + 1, nx - 1)
    y1 = min(y0 + 1, ny - 1)
    z1 = min(z0 + 1, nz - 1)
    fx = gx - x0
    fy = gy - y0
    fz = gz - z0
    c00 = values[x0, y0, z0] * (1 - fx) + values[x1, y0, z0] * fx
    c01 = values[x0, y0, z1] * (1 - fx) + values[x1, y0, z1] * fx
    c10 = values[x0, y1, z0] * (1 - fx) + values[x1, y1, z0] * fx
    c11 = values[x0, y1, z1] * (1 - fx) + values[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True, inline="always")
def _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta, fine_offsets,
                  px, py, pz):
    """Fine-first lookup: fine_meta rows are (ox, oy, oz, voxel, nx, ny, nz)."""
    for b in range(fine_meta.shape[0]):
        ox, oy, oz = fine_meta[b, 0], fine_meta[b, 1], fine_meta[b, 2]
        fv = fine_meta[b, 3]
        nx, ny, nz = int(fine_meta[b, 4]), int(fine_meta[b, 5]), int(fine_meta[b, 6])
        if (ox - 0.5 * fv <= px <= ox + (nx - 0.5) * fv
                and oy - 0.5 * fv <= py <= oy + (ny - 0.5) * fv
                and oz - 0.5 * fv <= pz <= oz + (nz - 0.5) * fv):
            block = fine_vals[fine_offsets[b]:fine_offsets[b + 1]].reshape(nx, ny, nz)
            return _trilinear(block, ox, oy, oz, fv, px, py, pz)
    return _trilinear(coarse, c_origin[0], c_origin[1], c_origin[2], c_voxel,
                      px, py, pz)


def _pack_fine(vol: SdfVolume):
    if not vol.fine_blocks:
        return (np.zeros(0, dtype=np.float32),
                np.zeros((0, 7)), np.zeros(1, dtype=np.int64))
    metas = []
    vals = []
    offsets = [0]
    for b in vol.fine_blocks:
        metas.append([b.origin[0], b.origin[1], b.origin[2], b.voxel,
                      *b.values.shape])
        vals.append(b.values.ravel())
        offsets.append(offsets[-1] + b.values.size)
    return (np.concatenate(vals).astype(np.float32), np.array(metas),
            np.array(offsets, dtype=np.int64))


def sample_volume(vol: SdfVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear SDF lookup at world points (fine blocks take precedence)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    fine_vals, fine_meta, fine_offsets = _pack_fine(vol)
    out = np.empty(len(pts))
    _sample_batch(vol.values, vol.origin, vol.voxel, fine_vals, fine_meta,
                  fine_offsets, pts, out)
    return out


@njit(cache=True)
def _sample_batch(coarse, c_origin, c_voxel, fine_vals, fine_meta, fine_offsets,
                  pts, out):
    for i in range(pts.shape[0]):
        out[i] = _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                               fine_offsets, pts[i, 0], pts[i, 1], pts[i, 2])


# ---------------------------------------------------------------------------
# Step II: raycasting
# ---------------------------------------------------------------------------

@dataclass
class PointMap:
    """Per-pixel ray-surface intersections from raycasting the SDF volume."""

    hit: np.ndarray  # (H, W) bool
    position: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    t: np.ndarray  # (H, W)
    part: np.ndarray  # (H, W) int8; -1 = none/body, else part tag
    token: str = ""

    @property
    def n_hit(self) -> int:
        return int(self.hit.sum())


@njit(cache=True)
def _raycast_kernel(coarse, c_origin, c_voxel, fine_vals, fine_meta, fine_offsets,
                    origins, dirs, lo, hi, min_step, tol, max_steps,
                    hit, t_out, pos, normal):
    n = origins.shape[0]
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        # Slab clip against the volume bounds.
        tmin = 0.0
        tmax = 1e30
        ok = True
        for a in range(3):
            o = origins[i, a]
            d = dirs[i, a]
            if abs(d) < 1e-12:
                if o < lo[a] or o > hi[a]:
                    ok = False
                    break
            else:
                t0 = (lo[a] - o) / d
                t1 = (hi[a] - o) / d
                if t0 > t1:
                    t0, t1 = t1, t0
                if t0 > tmin:
                    tmin = t0
                if t1 < tmax:
                    tmax = t1
        if not ok or tmax <= tmin:
            hit[i] = False
            continue
        t = tmin + 1e-6
        hit[i] = False
        t_prev = t
        s_prev = 1e30
        for _ in range(max_steps):
            if t > tmax:
                break
            px, py, pz = ox + t * dx, oy + t * dy, oz + t * dz
            s = _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                              fine_offsets, px, py, pz)
            if s < tol:
                # Secant refinement on the bracketing interval.
                t_lo, s_lo = t_prev, s_prev
                t_hi, s_hi = t, s
                if s >= -tol:
                    hit[i] = True
                    t_out[i] = t
                else:
                    for _ in range(24):
                        denom = s_lo - s_hi
                        if abs(denom) < 1e-12:
                            break
                        tm = t_lo + s_lo * (t_hi - t_lo) / denom
                        if tm < t_lo or tm > t_hi:
                            tm = 0.5 * (t_lo + t_hi)
                        pmx, pmy, pmz = ox + tm * dx, oy + tm * dy, oz + tm * dz
                        sm = _sample_multi(coarse, c_origin, c_voxel, fine_vals,
                                           fine_meta, fine_offsets, pmx, pmy, pmz)
                        if abs(sm) < tol:
                            t_hi = tm
                            break
                        if sm > 0:
                            t_lo, s_lo = tm, sm
                        else:
                            t_hi, s_hi = tm, sm
                    hit[i] = True
                    t_out[i] = t_hi
                break
            t_prev = t
            s_prev = s
            step = s if s > min_step else min_step
            t += step
        if hit[i]:
            th = t_out[i]
            px, py, pz = ox + th * dx, oy + th * dy, oz + th * dz
            pos[i, 0], pos[i, 1], pos[i, 2] = px, py, pz
            h = c_voxel * 0.5
            gx = (_sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                fine_offsets, px + h, py, pz)
                  - _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                  fine_offsets, px - h, py, pz))
            gy = (_sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                fine_offsets, px, py + h, pz)
                  - _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                  fine_offsets, px, py - h, pz))
            gz = (_sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                fine_offsets, px, py, pz + h)
                  - _sample_multi(coarse, c_origin, c_voxel, fine_vals, fine_meta,
                                  fine_offsets, px, py, pz - h))
            gl = np.sqrt(gx * gx + gy * gy + gz * gz)
            if gl > 0:
                normal[i, 0], normal[i, 1], normal[i, 2] = gx / gl, gy / gl, gz / gl


def raycast_rays(vol: SdfVolume, origins: np.ndarray, dirs: np.ndarray,
                 config) -> dict:
    """Sphere-trace arbitrary rays; returns dict of flat arrays."""
    fine_vals, fine_meta, fine_offsets = _pack_fine(vol)
    lo, hi = vol.bounds()
    n = len(origins)
    hit = np.zeros(n, dtype=np.bool_)
    t_out = np.zeros(n)
    pos = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    min_step = (vol.voxel / config.fine_factor) * 0.5
    _raycast_kernel(vol.values, vol.origin, vol.voxel, fine_vals, fine_meta,
                    fine_offsets,
                    np.ascontiguousarray(origins, dtype=np.float64),
                    np.ascontiguousarray(dirs, dtype=np.float64),
                    lo, hi, min_step, config.surface_tolerance,
                    config.max_trace_steps, hit, t_out, pos, normal)
    return {"hit": hit, "t": t_out, "position": pos, "normal": normal}


def raycast_pointmap(vol: SdfVolume, camera: Camera, config,
                     part_boxes=None) -> PointMap:
    """Raycast every pixel of ``camera`` against the baked volume."""
    origins, dirs = generate_all_rays(camera)
    res = raycast_rays(vol, origins, dirs, config)
    h, w = camera.height, camera.width
    part = np.full(h * w, HIT_NONE, dtype=np.int8)
    if part_boxes:
        pos = res["position"]
        for tag, (blo, bhi) in part_boxes.items():
            inside = res["hit"] & ((pos >= blo) & (pos <= bhi)).all(axis=1)
            part[inside] = tag
    return PointMap(
        hit=res["hit"].reshape(h, w),
        position=res["position"].reshape(h, w, 3),
        normal=res["normal"].reshape(h, w, 3),
        t=res["t"].reshape(h, w),
        part=part.reshape(h, w),
        token=vol.token,
    )
