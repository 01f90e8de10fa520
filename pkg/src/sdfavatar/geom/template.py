"""Procedural articulated templates: body, hands, and face.

The generators produce watertight marching-cubes meshes over smooth unions of
round-cone bones, together with skinning weights, part labels, part blend
weights (omega), body shape bases, and face expression blendshapes. They are
deterministic for a fixed config and act as stand-ins for licensed parametric
models at equivalent structural roles.
"""

import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np
from numba import njit

from .mesh import TriMesh
from .skinning import Joint, Skeleton, Pose, lbs_pose, skinning_matrices

PART_BODY = 0
PART_LEFT_HAND = 1
PART_RIGHT_HAND = 2
PART_FACE = 3
PART_NAMES = {PART_BODY: "body", PART_LEFT_HAND: "left-hand",
              PART_RIGHT_HAND: "right-hand", PART_FACE: "face"}

N_BODY_JOINTS = 22


@dataclass
class TemplateConfig:
    """Proportions (meters), mesh resolutions, and the generator seed."""

    seed: int = 0
    pelvis_height: float = 0.95
    spine_segment: float = 0.12
    chest_segment: float = 0.14
    neck_length: float = 0.10
    head_offset: float = 0.10
    head_radius: float = 0.105
    clavicle_drop: float = 0.06
    shoulder_halfwidth: float = 0.18
    upper_arm_length: float = 0.27
    forearm_length: float = 0.25
    palm_length: float = 0.09
    finger_spacing: float = 0.016
    finger_base_length: float = 0.032
    hip_halfwidth: float = 0.09
    hip_drop: float = 0.04
    thigh_length: float = 0.40
    shin_length: float = 0.40
    foot_length: float = 0.16
    torso_radius: float = 0.135
    neck_radius: float = 0.045
    arm_radius: float = 0.042
    forearm_radius: float = 0.034
    palm_radius: float = 0.028
    finger_radius: float = 0.0095
    thigh_radius: float = 0.072
    shin_radius: float = 0.048
    foot_radius: float = 0.032
    smooth_k: float = 0.03
    n_fingers: int = 5
    phalanges_per_finger: int = 3
    body_mc_resolution: int = 96
    hand_mc_resolution: int = 56
    face_mc_resolution: int = 64
    n_expression_shapes: int = 8
    n_shape_coeffs: int = 4
    seam_band: float = 0.03
    proportion_jitter: float = 0.0

    def __post_init__(self):
        lengths = [
            self.pelvis_height, self.spine_segment, self.chest_segment,
            self.neck_length, self.head_offset, self.head_radius,
            self.shoulder_halfwidth, self.upper_arm_length, self.forearm_length,
            self.palm_length, self.finger_base_length, self.hip_halfwidth,
            self.thigh_length, self.shin_length, self.foot_length,
            self.torso_radius, self.neck_radius, self.arm_radius,
            self.forearm_radius, self.palm_radius, self.finger_radius,
            self.thigh_radius, self.shin_radius, self.foot_radius,
        ]
        if any(x <= 0 for x in lengths):
            raise ValueError("template proportions must be positive")
        if self.n_fingers < 1 or self.phalanges_per_finger < 1:
            raise ValueError("finger counts must be positive")
        if min(self.body_mc_resolution, self.hand_mc_resolution,
               self.face_mc_resolution) < 16:
            raise ValueError("marching cubes resolution too low")

    @property
    def fingers_per_hand(self) -> int:
        return self.n_fingers * self.phalanges_per_finger

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TemplateConfig":
        return TemplateConfig(**json.loads(text))


@dataclass
class Expression:
    """Blendshape coefficients; values clamped to [-1, 2]."""

    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        if not np.isfinite(psi).all():
            raise ValueError("expression coefficients must be finite")
        self.psi = np.clip(psi, -1.0, 2.0)

    @staticmethod
    def neutral(k: int) -> "Expression":
        return Expression(np.zeros(k))

    def to_dict(self) -> dict:
        return {"psi": self.psi.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Expression":
        return Expression(np.asarray(d["psi"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Round-cone bone soup (analytic SDF) shared by all generators
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _round_cone_dist(px, py, pz, ax, ay, az, bx, by, bz, r1, r2):
    """Exact distance to a round cone (capsule with lerped end radii)."""
    bax, bay, baz = bx - ax, by - ay, bz - az
    l2 = bax * bax + bay * bay + baz * baz
    rr = r1 - r2
    a2 = l2 - rr * rr
    il2 = 1.0 / l2 if l2 > 0.0 else 0.0
    pax, pay, paz = px - ax, py - ay, pz - az
    y = pax * bax + pay * bay + paz * baz
    z = y - l2
    xx = pax * l2 - bax * y
    xy = pay * l2 - bay * y
    xz = paz * l2 - baz * y
    x2 = xx * xx + xy * xy + xz * xz
    y2 = y * y * l2
    z2 = z * z * l2
    k = rr * rr * x2
    if np.sign(z) * a2 * z2 > k:
        return np.sqrt(x2 + z2) * il2 - r2
    if np.sign(y) * a2 * y2 < k:
        return np.sqrt(x2 + y2) * il2 - r1
    return (np.sqrt(x2 * a2 * il2) + y * rr) * il2 - r1


@njit(cache=True)
def _bone_soup_sdf(points, seg_a, seg_b, rad_a, rad_b, smooth_k, out):
    nb = seg_a.shape[0]
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        d = 1e30
        for j in range(nb):
            dj = _round_cone_dist(
                px, py, pz,
                seg_a[j, 0], seg_a[j, 1], seg_a[j, 2],
                seg_b[j, 0], seg_b[j, 1], seg_b[j, 2],
                rad_a[j], rad_b[j],
            )
            # polynomial smooth min
            h = smooth_k - abs(d - dj)
            if h > 0.0:
                m = d if d < dj else dj
                d = m - h * h * 0.25 / smooth_k
            elif dj < d:
                d = dj
        out[i] = d


@njit(cache=True)
def _bone_surface_dists(points, seg_a, seg_b, rad_a, rad_b, out):
    """Per-bone surface distance matrix (P, B) used for skin weights."""
    nb = seg_a.shape[0]
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for j in range(nb):
            out[i, j] = _round_cone_dist(
                px, py, pz,
                seg_a[j, 0], seg_a[j, 1], seg_a[j, 2],
                seg_b[j, 0], seg_b[j, 1], seg_b[j, 2],
                rad_a[j], rad_b[j],
            )


@dataclass
class BoneSoup:
    """Round-cone segments with their bind joints and part tags."""

    seg_a: np.ndarray  # (B, 3)
    seg_b: np.ndarray  # (B, 3)
    rad_a: np.ndarray  # (B,)
    rad_b: np.ndarray  # (B,)
    joint: np.ndarray  # (B,) bind joint index
    part: np.ndarray  # (B,) part tag
    smooth_k: float = 0.03

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(len(p))
        _bone_soup_sdf(p, self.seg_a, self.seg_b, self.rad_a, self.rad_b,
                       self.smooth_k, out)
        return out

    def surface_distances(self, points: np.ndarray) -> np.ndarray:
        p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty((len(p), len(self.seg_a)))
        _bone_surface_dists(p, self.seg_a, self.seg_b, self.rad_a, self.rad_b, out)
        return out

    def posed(self, T: np.ndarray) -> "BoneSoup":
        """Transform segments by per-joint skinning matrices (J, 4, 4)."""
        Tj = T[self.joint]
        a = np.einsum("bij,bj->bi", Tj[:, :3, :3], self.seg_a) + Tj[:, :3, 3]
        b = np.einsum("bij,bj->bi", Tj[:, :3, :3], self.seg_b) + Tj[:, :3, 3]
        return BoneSoup(a, b, self.rad_a.copy(), self.rad_b.copy(),
                        self.joint.copy(), self.part.copy(), self.smooth_k)


def _smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _marching_cubes(sdf_fn, lo: np.ndarray, hi: np.ndarray, resolution: int) -> TriMesh:
    """Mesh the zero level set of ``sdf_fn`` over [lo, hi]; outward orientation."""
    from skimage import measure

    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    extent = hi - lo
    step = extent.max() / resolution
    dims = np.maximum((extent / step).astype(int) + 1, 2)
    axes = [lo[k] + np.arange(dims[k]) * step for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = sdf_fn(grid).reshape(dims)
    verts, faces, _, _ = measure.marching_cubes(values, level=0.0, spacing=(step, step, step))
    verts = verts + lo
    mesh = TriMesh(verts, faces.astype(np.int32))
    # Enforce outward orientation (positive signed volume).
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
    if vol < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def _skin_weights_from_bones(points: np.ndarray, soup: BoneSoup, n_joints: int,
                             temperature: float = 0.012, prune: float = 0.02) -> np.ndarray:
    """Soft-assign vertices to bones by surface distance, pooled per joint.

    Sharp temperature keeps segment interiors rigid while blending across
    joints within a couple of centimeters of the seams.
    """
    d = soup.surface_distances(points)
    d = d - d.min(axis=1, keepdims=True)
    w = np.exp(-d / temperature)
    w[w < prune * w.max(axis=1, keepdims=True)] = 0.0
    joint_w = np.zeros((len(points), n_joints))
    for b in range(len(soup.joint)):
        joint_w[:, soup.joint[b]] += w[:, b]
    joint_w /= joint_w.sum(axis=1, keepdims=True)
    return joint_w


# ---------------------------------------------------------------------------
# Skeleton + bone table construction
# ---------------------------------------------------------------------------

FINGER_LENGTH_SCALE = (0.78, 0.95, 1.0, 0.92, 0.72)


def _hand_local_layout(cfg: TemplateConfig):
    """Finger base positions and phalanx lengths in the hand-local frame.

    Hand-local frame: wrist at the origin, fingers extending along +x, palm
    normal -y (curl axis -z).
    """
    bases = []
    lengths = []
    n = cfg.n_fingers
    for f in range(n):
        z = (f - (n - 1) / 2.0) * cfg.finger_spacing
        scale = FINGER_LENGTH_SCALE[f % len(FINGER_LENGTH_SCALE)]
        bases.append(np.array([cfg.palm_length + 0.01, 0.0, z]))
        lengths.append([cfg.finger_base_length * scale * (0.95 ** k)
                        for k in range(cfg.phalanges_per_finger)])
    return bases, lengths


def _build_body_skeleton(cfg: TemplateConfig) -> Skeleton:
    j: List[Joint] = []
    py = cfg.pelvis_height
    sy = cfg.spine_segment
    j.append(Joint("pelvis", -1, np.array([0.0, py, 0.0])))
    j.append(Joint("spine1", 0, np.array([0.0, sy, 0.0])))
    j.append(Joint("spine2", 1, np.array([0.0, sy, 0.0])))
    j.append(Joint("spine3", 2, np.array([0.0, cfg.chest_segment, 0.0])))
    j.append(Joint("neck", 3, np.array([0.0, cfg.neck_length, 0.0])))
    j.append(Joint("head", 4, np.array([0.0, cfg.head_offset, 0.0])))
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        base = len(j)
        j.append(Joint(f"clavicle_{side}", 3,
                       np.array([sgn * 0.05, cfg.clavicle_drop, 0.0])))
        j.append(Joint(f"shoulder_{side}", base,
                       np.array([sgn * (cfg.shoulder_halfwidth - 0.05), 0.01, 0.0])))
        j.append(Joint(f"elbow_{side}", base + 1,
                       np.array([sgn * cfg.upper_arm_length, 0.0, 0.0])))
        j.append(Joint(f"wrist_{side}", base + 2,
                       np.array([sgn * cfg.forearm_length, 0.0, 0.0])))
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        base = len(j)
        j.append(Joint(f"hip_{side}", 0,
                       np.array([sgn * cfg.hip_halfwidth, -cfg.hip_drop, 0.0])))
        j.append(Joint(f"knee_{side}", base, np.array([0.0, -cfg.thigh_length, 0.0])))
        j.append(Joint(f"ankle_{side}", base + 1, np.array([0.0, -cfg.shin_length, 0.0])))
        j.append(Joint(f"foot_{side}", base + 2,
                       np.array([0.0, -0.05, cfg.foot_length])))
    assert len(j) == N_BODY_JOINTS
    # Finger joints: 15 per hand (5 fingers x 3 phalanges by default).
    bases, lengths = _hand_local_layout(cfg)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        wrist = 9 if side == "left" else 13
        axis = np.array([0.0, 0.0, -sgn])  # positive angle curls toward the palm
        for f, (base_pos, phal) in enumerate(zip(bases, lengths)):
            parent = wrist
            # Base offset expressed in the body frame (+x fingers for left,
            # mirrored for right).
            off = base_pos * np.array([sgn, 1.0, sgn])
            for k in range(cfg.phalanges_per_finger):
                j.append(Joint(f"{side}_finger{f}_{k}", parent, off.copy(),
                               hinge_axis=axis))
                parent = len(j) - 1
                off = np.array([sgn * phal[k], 0.0, 0.0])
    return Skeleton(j, N_BODY_JOINTS, cfg.fingers_per_hand)


def _hand_transform(cfg: TemplateConfig, skeleton: Skeleton, side: str) -> np.ndarray:
    """Rigid transform mapping hand-local coordinates into body rest space."""
    rest = skeleton.rest_world_positions()
    wrist = rest[skeleton.joint_index(f"wrist_{side}")]
    T = np.eye(4)
    if side == "right":
        T[:3, :3] = np.diag([-1.0, 1.0, -1.0])  # 180 deg about +y
    T[:3, 3] = wrist
    return T


def _face_transform(cfg: TemplateConfig, skeleton: Skeleton) -> np.ndarray:
    rest = skeleton.rest_world_positions()
    head = rest[skeleton.joint_index("head")]
    T = np.eye(4)
    T[:3, 3] = head + np.array([0.0, cfg.head_radius * 0.35, 0.0])
    return T


def _hand_bones_local(cfg: TemplateConfig, part: int) -> BoneSoup:
    """Hand bone soup in the hand-local frame; joints indexed 0..15 locally
    (0 = wrist, then finger joints in order)."""
    seg_a, seg_b, ra, rb, joints, parts = [], [], [], [], [], []

    def add(a, b, r1, r2, joint):
        seg_a.append(np.asarray(a, dtype=np.float64))
        seg_b.append(np.asarray(b, dtype=np.float64))
        ra.append(r1)
        rb.append(r2)
        joints.append(joint)
        parts.append(part)

    add([0.0, 0.0, 0.0], [cfg.palm_length, 0.0, 0.0],
        cfg.palm_radius, cfg.palm_radius * 0.85, 0)
    bases, lengths = _hand_local_layout(cfg)
    jidx = 1
    for f, (base, phal) in enumerate(zip(bases, lengths)):
        pos = base.copy()
        r = cfg.finger_radius
        for k in range(cfg.phalanges_per_finger):
            nxt = pos + np.array([phal[k], 0.0, 0.0])
            add(pos, nxt, r, r * 0.88, jidx)
            pos = nxt
            r *= 0.88
            jidx += 1
    return BoneSoup(
        np.stack(seg_a), np.stack(seg_b), np.array(ra), np.array(rb),
        np.array(joints, dtype=np.int64), np.array(parts, dtype=np.int64),
        cfg.smooth_k * 0.35,
    )


def _build_body_bones(cfg: TemplateConfig, skeleton: Skeleton) -> BoneSoup:
    rest = skeleton.rest_world_positions()
    idx = skeleton.joint_index
    seg_a, seg_b, ra, rb, joints, parts = [], [], [], [], [], []

    def add(a, b, r1, r2, joint, part=PART_BODY):
        seg_a.append(np.asarray(a, dtype=np.float64))
        seg_b.append(np.asarray(b, dtype=np.float64))
        ra.append(r1)
        rb.append(r2)
        joints.append(joint)
        parts.append(part)

    tr = cfg.torso_radius
    add(rest[idx("pelvis")] - [0, 0.06, 0], rest[idx("spine1")], tr, tr * 0.94, idx("pelvis"))
    add(rest[idx("spine1")], rest[idx("spine2")], tr * 0.94, tr * 0.9, idx("spine1"))
    add(rest[idx("spine2")], rest[idx("spine3")], tr * 0.9, tr * 0.92, idx("spine2"))
    add(rest[idx("spine3")], rest[idx("neck")], tr * 0.92, cfg.neck_radius * 1.6, idx("spine3"))
    add(rest[idx("neck")], rest[idx("head")], cfg.neck_radius, cfg.neck_radius, idx("neck"))
    head_c = rest[idx("head")] + np.array([0.0, cfg.head_radius * 0.35, 0.0])
    add(head_c, head_c + [0, 0.01, 0], cfg.head_radius, cfg.head_radius, idx("head"), PART_FACE)
    # jaw hint so the head is not a pure sphere
    add(head_c + [0, -0.045, 0.02], head_c + [0, -0.055, 0.05],
        cfg.head_radius * 0.55, 0.035, idx("head"), PART_FACE)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        part = PART_LEFT_HAND if side == "left" else PART_RIGHT_HAND
        add(rest[idx("spine3")] + [sgn * 0.03, 0.05, 0], rest[idx(f"shoulder_{side}")],
            0.055, cfg.arm_radius * 1.25, idx(f"clavicle_{side}"))
        add(rest[idx(f"shoulder_{side}")], rest[idx(f"elbow_{side}")],
            cfg.arm_radius, cfg.arm_radius * 0.85, idx(f"shoulder_{side}"))
        add(rest[idx(f"elbow_{side}")], rest[idx(f"wrist_{side}")],
            cfg.forearm_radius, cfg.forearm_radius * 0.8, idx(f"elbow_{side}"))
        # Hand bones: reuse the hand-local soup transformed into body space.
        local = _hand_bones_local(cfg, part)
        T = _hand_transform(cfg, skeleton, side)
        a = local.seg_a @ T[:3, :3].T + T[:3, 3]
        b = local.seg_b @ T[:3, :3].T + T[:3, 3]
        wrist = idx(f"wrist_{side}")
        finger0 = N_BODY_JOINTS + (0 if side == "left" else cfg.fingers_per_hand)
        for k in range(len(local.joint)):
            lj = local.joint[k]
            bind = wrist if lj == 0 else finger0 + (lj - 1)
            add(a[k], b[k], local.rad_a[k], local.rad_b[k], bind, part)
        add(rest[idx(f"hip_{side}")], rest[idx(f"knee_{side}")],
            cfg.thigh_radius, cfg.thigh_radius * 0.7, idx(f"hip_{side}"))
        add(rest[idx(f"knee_{side}")], rest[idx(f"ankle_{side}")],
            cfg.shin_radius, cfg.shin_radius * 0.72, idx(f"knee_{side}"))
        add(rest[idx(f"ankle_{side}")], rest[idx(f"foot_{side}")],
            cfg.foot_radius, cfg.foot_radius * 0.6, idx(f"ankle_{side}"))
    return BoneSoup(
        np.stack(seg_a), np.stack(seg_b), np.array(ra), np.array(rb),
        np.array(joints, dtype=np.int64), np.array(parts, dtype=np.int64),
        cfg.smooth_k,
    )


# ---------------------------------------------------------------------------
# SkinnedTemplate
# ---------------------------------------------------------------------------

@dataclass
class SkinnedTemplate:
    """Articulated template: mesh + skeleton + weights + part structure."""

    mesh: TriMesh
    skeleton: Skeleton
    skin_weights: np.ndarray  # (V, J), rows sum to 1
    part_blend_weights: np.ndarray  # (V,) omega in [0, 1]
    part_labels: np.ndarray  # (V,) part tags
    shape_basis: np.ndarray  # (n_beta, V, 3)
    bones: BoneSoup
    hand_left_transform: np.ndarray
    hand_right_transform: np.ndarray
    face_transform: np.ndarray
    config: TemplateConfig

    @property
    def n_beta(self) -> int:
        return len(self.shape_basis)

    def shaped_vertices(self, beta: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.mesh.vertices
        if beta is None or len(beta) == 0:
            return v
        if len(beta) > self.n_beta:
            raise ValueError("too many shape coefficients")
        return v + np.tensordot(beta, self.shape_basis[: len(beta)], axes=1)

    def posed_vertices(self, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        """LBS-posed vertices and the per-joint skinning matrices."""
        return lbs_pose(self.shaped_vertices(pose.beta), self.skin_weights,
                        self.skeleton, pose)

    def posed_mesh(self, pose: Pose) -> TriMesh:
        v, _ = self.posed_vertices(pose)
        return TriMesh(v, self.mesh.faces)

    def posed_bones(self, pose: Pose) -> BoneSoup:
        return self.bones.posed(skinning_matrices(self.skeleton, pose))

    def analytic_sdf(self, points: np.ndarray, pose: Optional[Pose] = None) -> np.ndarray:
        """Signed distance of the round-cone soup (rest pose by default)."""
        soup = self.bones if pose is None else self.posed_bones(pose)
        return soup.sdf(points)

    def validate(self):
        w = self.skin_weights
        if w.min() < 0 or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("skin weights must be non-negative and sum to 1")
        om = self.part_blend_weights
        if om.min() < -1e-9 or om.max() > 1 + 1e-9:
            raise ValueError("omega out of [0, 1]")
        if self.mesh.faces.min() < 0 or self.mesh.faces.max() >= self.mesh.n_vertices:
            raise ValueError("faces index invalid vertices")


def _assign_parts_and_omega(cfg: TemplateConfig, skeleton: Skeleton,
                            vertices: np.ndarray, soup: BoneSoup):
    """Part labels from the nearest bone; omega from seam-plane smoothsteps."""
    d = soup.surface_distances(vertices)
    nearest_bone = np.argmin(d, axis=1)
    labels = soup.part[nearest_bone].astype(np.uint8)

    rest = skeleton.rest_world_positions()
    band = cfg.seam_band
    omega = np.zeros(len(vertices))
    for side, sgn, part in (("left", 1.0, PART_LEFT_HAND),
                            ("right", -1.0, PART_RIGHT_HAND)):
        wrist = rest[skeleton.joint_index(f"wrist_{side}")]
        s = (vertices[:, 0] - wrist[0]) * sgn  # distance past the wrist plane
        om = _smoothstep(-band / 2, band / 2, s)
        mask = labels == part
        omega[mask] = np.maximum(omega[mask], om[mask])
        # Forearm vertices within the seam ramp also carry partial omega.
        ramp = (om > 0) & (labels == PART_BODY) & (np.abs(vertices[:, 1] - wrist[1]) < 0.08)
        omega[ramp] = np.maximum(omega[ramp], om[ramp])
        labels[ramp & (om > 0.5)] = part
    neck = rest[skeleton.joint_index("neck")]
    seam_y = neck[1] + cfg.neck_length * 0.55
    s = vertices[:, 1] - seam_y
    om = _smoothstep(-band / 2, band / 2, s)
    head_region = np.linalg.norm(
        vertices - (rest[skeleton.joint_index("head")] + [0, cfg.head_radius * 0.35, 0]),
        axis=1) < cfg.head_radius * 2.2
    mask = (labels == PART_FACE) | (head_region & (om > 0))
    omega[mask] = np.maximum(omega[mask], om[mask])
    labels[mask & (om > 0.5)] = PART_FACE
    labels[mask & (om <= 0.5) & (labels == PART_FACE)] = PART_FACE
    return labels, omega


def _build_shape_basis(cfg: TemplateConfig, vertices: np.ndarray,
                       skeleton: Skeleton) -> np.ndarray:
    rest = skeleton.rest_world_positions()
    pelvis = rest[skeleton.joint_index("pelvis")]
    v = vertices
    basis = np.zeros((cfg.n_shape_coeffs, len(v), 3))
    if cfg.n_shape_coeffs >= 1:
        basis[0] = (v - pelvis) * 0.05  # overall scale
    if cfg.n_shape_coeffs >= 2:
        lateral = v - pelvis
        lateral[:, 1] = 0.0
        basis[1] = lateral * 0.08  # girth
    if cfg.n_shape_coeffs >= 3:
        below = np.clip((pelvis[1] - v[:, 1]) / max(pelvis[1], 1e-6), 0.0, 1.0)
        basis[2][:, 1] = -below * 0.06  # leg length
    if cfg.n_shape_coeffs >= 4:
        belly = pelvis + np.array([0.0, 0.12, cfg.torso_radius * 0.8])
        g = np.exp(-((v - belly) ** 2).sum(axis=1) / (2 * 0.18 ** 2))
        basis[3][:, 2] = g * 0.05  # belly
    return basis


def build_body_template(config: TemplateConfig) -> SkinnedTemplate:
    """Deterministic articulated body template for a fixed config."""
    cfg = config
    if cfg.proportion_jitter > 0:
        rng = np.random.default_rng(cfg.seed)
        scale = 1.0 + rng.uniform(-cfg.proportion_jitter, cfg.proportion_jitter)
        cfg = TemplateConfig(**{**asdict(cfg),
                                "pelvis_height": cfg.pelvis_height * scale,
                                "proportion_jitter": 0.0})
    skeleton = _build_body_skeleton(cfg)
    soup = _build_body_bones(cfg, skeleton)
    lo = soup.seg_a.min(axis=0)
    hi = soup.seg_a.max(axis=0)
    lo = np.minimum(lo, soup.seg_b.min(axis=0)) - (soup.rad_a.max() + 4 * cfg.smooth_k)
    hi = np.maximum(hi, soup.seg_b.max(axis=0)) + (soup.rad_a.max() + 4 * cfg.smooth_k)
    mesh = _marching_cubes(soup.sdf, lo, hi, cfg.body_mc_resolution)
    weights = _skin_weights_from_bones(mesh.vertices, soup, skeleton.n_joints)
    labels, omega = _assign_parts_and_omega(cfg, skeleton, mesh.vertices, soup)
    basis = _build_shape_basis(cfg, mesh.vertices, skeleton)
    return SkinnedTemplate(
        mesh=mesh,
        skeleton=skeleton,
        skin_weights=weights,
        part_blend_weights=omega,
        part_labels=labels,
        shape_basis=basis,
        bones=soup,
        hand_left_transform=_hand_transform(cfg, skeleton, "left"),
        hand_right_transform=_hand_transform(cfg, skeleton, "right"),
        face_transform=_face_transform(cfg, skeleton),
        config=cfg,
    )


def _build_hand_skeleton(cfg: TemplateConfig) -> Skeleton:
    """Standalone hand skeleton: wrist root + finger hinge joints (+x fingers)."""
    joints = [Joint("wrist", -1, np.zeros(3))]
    bases, lengths = _hand_local_layout(cfg)
    axis = np.array([0.0, 0.0, -1.0])
    for f, (base, phal) in enumerate(zip(bases, lengths)):
        parent = 0
        off = base.copy()
        for k in range(cfg.phalanges_per_finger):
            joints.append(Joint(f"finger{f}_{k}", parent, off.copy(), hinge_axis=axis))
            parent = len(joints) - 1
            off = np.array([phal[k], 0.0, 0.0])
    return Skeleton(joints, 1, cfg.fingers_per_hand, n_hands=1)


def build_hand_template(config: TemplateConfig, side: str = "left") -> SkinnedTemplate:
    """Watertight articulated hand in the hand-local frame (wrist at origin)."""
    part = PART_LEFT_HAND if side == "left" else PART_RIGHT_HAND
    soup = _hand_bones_local(config, part)
    skeleton = _build_hand_skeleton(config)
    pad = config.palm_radius * 3
    lo = np.minimum(soup.seg_a.min(axis=0), soup.seg_b.min(axis=0)) - pad
    hi = np.maximum(soup.seg_a.max(axis=0), soup.seg_b.max(axis=0)) + pad
    mesh = _marching_cubes(soup.sdf, lo, hi, config.hand_mc_resolution)
    weights = _skin_weights_from_bones(mesh.vertices, soup, skeleton.n_joints,
                                       temperature=0.006)
    labels = np.full(mesh.n_vertices, part, dtype=np.uint8)
    omega = np.ones(mesh.n_vertices)
    return SkinnedTemplate(
        mesh=mesh,
        skeleton=skeleton,
        skin_weights=weights,
        part_blend_weights=omega,
        part_labels=labels,
        shape_basis=np.zeros((0, mesh.n_vertices, 3)),
        bones=soup,
        hand_left_transform=np.eye(4),
        hand_right_transform=np.eye(4),
        face_transform=np.eye(4),
        config=config,
    )


# ---------------------------------------------------------------------------
# Face template with expression blendshapes
# ---------------------------------------------------------------------------

@dataclass
class FaceTemplate:
    """Neutral head mesh + blendshape displacement basis + proxy albedo."""

    mesh: TriMesh
    blend_basis: np.ndarray  # (K, V, 3)
    albedo: np.ndarray  # (V, 3) in [0, 1]
    box_lo: np.ndarray  # face bounding box (face-local)
    box_hi: np.ndarray
    config: TemplateConfig

    @property
    def n_shapes(self) -> int:
        return len(self.blend_basis)

    def expression_vertices(self, expression: Expression) -> np.ndarray:
        psi = expression.psi
        if len(psi) != self.n_shapes:
            raise ValueError(
                f"expression has {len(psi)} coefficients, template has {self.n_shapes}"
            )
        return self.mesh.vertices + np.tensordot(psi, self.blend_basis, axes=1)

    def expression_mesh(self, expression: Expression) -> TriMesh:
        return TriMesh(self.expression_vertices(expression), self.mesh.faces)


def _face_soup(cfg: TemplateConfig) -> BoneSoup:
    r = cfg.head_radius
    seg_a, seg_b, ra, rb = [], [], [], []

    def add(a, b, r1, r2):
        seg_a.append(np.asarray(a, dtype=np.float64))
        seg_b.append(np.asarray(b, dtype=np.float64))
        ra.append(r1)
        rb.append(r2)

    add([0, 0.01, -0.01], [0, 0.02, -0.01], r, r * 0.98)  # skull
    add([0, -0.55 * r, 0.1 * r], [0, -0.8 * r, 0.45 * r], r * 0.52, 0.03)  # jaw
    add([0, -0.1 * r, 0.85 * r], [0, -0.38 * r, 1.0 * r], 0.016, 0.012)  # nose
    add([-0.35 * r, 0.28 * r, 0.72 * r], [0.35 * r, 0.28 * r, 0.72 * r], 0.018, 0.018)  # brow
    add([0, -0.28 * r, -0.1 * r], [0, -1.5 * r, -0.12 * r], r * 0.5, cfg.neck_radius)  # neck stub
    n = len(seg_a)
    return BoneSoup(np.stack(seg_a), np.stack(seg_b), np.array(ra), np.array(rb),
                    np.zeros(n, dtype=np.int64),
                    np.full(n, PART_FACE, dtype=np.int64), cfg.smooth_k * 0.6)


def _gaussian_mask(v, center, sigma):
    return np.exp(-((v - center) ** 2).sum(axis=1) / (2 * sigma ** 2))


def _build_face_blendshapes(cfg: TemplateConfig, v: np.ndarray) -> np.ndarray:
    r = cfg.head_radius
    K = cfg.n_expression_shapes
    basis = np.zeros((K, len(v), 3))
    mouth = np.array([0.0, -0.62 * r, 0.78 * r])
    if K >= 1:  # jaw open: rotate the lower face down about an ear-height axis
        pivot = np.array([0.0, -0.35 * r, 0.0])
        mask = _smoothstep(0.0, 0.5 * r, -(v[:, 1] - pivot[1])) * _smoothstep(-0.2 * r, 0.35 * r, v[:, 2])
        ang = 0.30
        rel = v - pivot
        rot = rel.copy()
        rot[:, 1] = rel[:, 1] * np.cos(ang) - rel[:, 2] * np.sin(ang)
        rot[:, 2] = rel[:, 1] * np.sin(ang) + rel[:, 2] * np.cos(ang)
        basis[0] = (rot - rel) * mask[:, None]
    if K >= 2:  # smile: mouth corners out and up
        for sx in (-1.0, 1.0):
            corner = mouth + np.array([sx * 0.38 * r, 0.02, -0.05 * r])
            g = _gaussian_mask(v, corner, 0.35 * r)
            basis[1][:, 0] += sx * g * 0.012
            basis[1][:, 1] += g * 0.010
    if K >= 3:  # frown
        basis[2][:, 1] = -_gaussian_mask(v, mouth, 0.4 * r) * 0.010
    if K >= 4:  # brow raise
        brow = np.array([0.0, 0.3 * r, 0.8 * r])
        basis[3][:, 1] = _gaussian_mask(v, brow, 0.5 * r) * 0.012
    if K >= 5:  # jaw sideways
        low = _smoothstep(0.0, 0.6 * r, -(v[:, 1] + 0.3 * r))
        basis[4][:, 0] = low * 0.010
    if K >= 6:  # cheek puff
        for sx in (-1.0, 1.0):
            cheek = np.array([sx * 0.55 * r, -0.3 * r, 0.5 * r])
            g = _gaussian_mask(v, cheek, 0.4 * r)
            basis[5][:, 0] += sx * g * 0.008
            basis[5][:, 2] += g * 0.006
    if K >= 7:  # eye squeeze
        for sx in (-1.0, 1.0):
            eye = np.array([sx * 0.35 * r, 0.1 * r, 0.82 * r])
            basis[6][:, 1] += -_gaussian_mask(v, eye, 0.22 * r) * 0.006
    if K >= 8:  # nose scrunch
        nose = np.array([0.0, -0.2 * r, 0.95 * r])
        g = _gaussian_mask(v, nose, 0.3 * r)
        basis[7][:, 1] = g * 0.006
        basis[7][:, 2] = -g * 0.005
    return basis


def _face_albedo(cfg: TemplateConfig, v: np.ndarray) -> np.ndarray:
    r = cfg.head_radius
    skin = np.array([0.87, 0.68, 0.55])
    albedo = np.tile(skin, (len(v), 1))
    mouth = np.array([0.0, -0.62 * r, 0.80 * r])
    lips = _gaussian_mask(v, mouth, 0.16 * r)
    albedo += lips[:, None] * (np.array([0.72, 0.30, 0.30]) - skin)
    for sx in (-1.0, 1.0):
        eye = np.array([sx * 0.35 * r, 0.1 * r, 0.86 * r])
        g = _gaussian_mask(v, eye, 0.1 * r)
        albedo += g[:, None] * (np.array([0.25, 0.2, 0.2]) - skin)
        brow = np.array([sx * 0.35 * r, 0.3 * r, 0.8 * r])
        g = _gaussian_mask(v, brow, 0.12 * r)
        albedo += g[:, None] * (np.array([0.35, 0.25, 0.18]) - skin)
    hairline = _smoothstep(0.45 * r, 0.75 * r, v[:, 1]) * _smoothstep(0.6 * r, -0.2 * r, v[:, 2])
    albedo += hairline[:, None] * (np.array([0.28, 0.22, 0.16]) - skin)
    return np.clip(albedo, 0.0, 1.0)


def build_face_template(config: TemplateConfig) -> FaceTemplate:
    """Watertight head mesh in the face-local frame (origin at head center)."""
    soup = _face_soup(config)
    r = config.head_radius
    lo = np.array([-1.6 * r, -2.2 * r, -1.5 * r])
    hi = np.array([1.6 * r, 1.5 * r, 1.6 * r])
    mesh = _marching_cubes(soup.sdf, lo, hi, config.face_mc_resolution)
    basis = _build_face_blendshapes(config, mesh.vertices)
    albedo = _face_albedo(config, mesh.vertices)
    margin = 0.04
    return FaceTemplate(
        mesh=mesh,
        blend_basis=basis,
        albedo=albedo,
        box_lo=mesh.vertices.min(axis=0) - margin,
        box_hi=mesh.vertices.max(axis=0) + margin,
        config=config,
    )


# ---------------------------------------------------------------------------
# Indexed-mesh text format (versioned header; vertex/face/weight sections)
# ---------------------------------------------------------------------------

TEMPLATE_FORMAT_VERSION = 1


def save_template_text(template: SkinnedTemplate, path: str):
    with open(path, "w") as f:
        f.write(f"sdfavatar-template {TEMPLATE_FORMAT_VERSION}\n")
        f.write(f"config {json.dumps(asdict(template.config), sort_keys=True)}\n")
        sk = template.skeleton
        f.write(f"joints {sk.n_joints} {sk.n_body_joints} {sk.n_finger_joints_per_hand}\n")
        for j in sk.joints:
            hinge = j.hinge_axis if j.hinge_axis is not None else ("nan", "nan", "nan")
            f.write(f"{j.name} {j.parent} "
                    + " ".join(f"{x:.17g}" for x in j.rest_offset) + " "
                    + " ".join(str(x) for x in hinge) + "\n")
        v = template.mesh.vertices
        f.write(f"vertices {len(v)}\n")
        for row in v:
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")
        faces = template.mesh.faces
        f.write(f"faces {len(faces)}\n")
        for row in faces:
            f.write(f"{row[0]} {row[1]} {row[2]}\n")
        w = template.skin_weights
        f.write(f"weights {w.shape[0]} {w.shape[1]}\n")
        for row in w:
            nz = np.nonzero(row)[0]
            f.write(f"{len(nz)} " + " ".join(f"{j} {row[j]:.17g}" for j in nz) + "\n")
        f.write(f"omega {len(template.part_blend_weights)}\n")
        for x in template.part_blend_weights:
            f.write(f"{x:.17g}\n")
        f.write(f"labels {len(template.part_labels)}\n")
        f.write(" ".join(str(int(x)) for x in template.part_labels) + "\n")


def load_template_text(path: str) -> SkinnedTemplate:
    with open(path) as f:
        header = f.readline().split()
        if header[0] != "sdfavatar-template":
            raise ValueError("not a template file")
        if int(header[1]) > TEMPLATE_FORMAT_VERSION:
            raise ValueError(f"template format version {header[1]} too new")
        line = f.readline()
        cfg = TemplateConfig(**json.loads(line[len("config "):]))
        nj, nb, nf = (int(x) for x in f.readline().split()[1:])
        joints = []
        for _ in range(nj):
            parts = f.readline().split()
            hinge = None
            if parts[-3] != "nan":
                hinge = np.array([float(x) for x in parts[-3:]])
            joints.append(Joint(parts[0], int(parts[1]),
                                np.array([float(x) for x in parts[2:5]]), hinge))
        skeleton = Skeleton(joints, nb, nf)
        nv = int(f.readline().split()[1])
        verts = np.array([[float(x) for x in f.readline().split()] for _ in range(nv)])
        nfaces = int(f.readline().split()[1])
        faces = np.array([[int(x) for x in f.readline().split()] for _ in range(nfaces)],
                         dtype=np.int32)
        nw, nwj = (int(x) for x in f.readline().split()[1:])
        weights = np.zeros((nw, nwj))
        for i in range(nw):
            parts = f.readline().split()
            k = int(parts[0])
            for c in range(k):
                weights[i, int(parts[1 + 2 * c])] = float(parts[2 + 2 * c])
        f.readline()
        omega = np.array([float(f.readline()) for _ in range(nv)])
        f.readline()
        labels = np.array([int(x) for x in f.readline().split()], dtype=np.uint8)
    soup = _build_body_bones(cfg, skeleton) if nb == N_BODY_JOINTS else _hand_bones_local(cfg, int(labels[0]))
    mesh = TriMesh(verts, faces)
    return SkinnedTemplate(
        mesh=mesh,
        skeleton=skeleton,
        skin_weights=weights,
        part_blend_weights=omega,
        part_labels=labels,
        shape_basis=_build_shape_basis(cfg, verts, skeleton) if nb == N_BODY_JOINTS
        else np.zeros((0, nv, 3)),
        bones=soup,
        hand_left_transform=_hand_transform(cfg, skeleton, "left") if nb == N_BODY_JOINTS else np.eye(4),
        hand_right_transform=_hand_transform(cfg, skeleton, "right") if nb == N_BODY_JOINTS else np.eye(4),
        face_transform=_face_transform(cfg, skeleton) if nb == N_BODY_JOINTS else np.eye(4),
        config=cfg,
    )
