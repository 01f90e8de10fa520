"""Avatar assembly: part blending, composed SDF/color fields, tone mapping.

Composition follows the banded piecewise blend: inside
``band_lo < s_part < band_hi`` the part and body values mix with the
template's per-vertex part weight omega (queried by nearest-point projection
onto the posed template); everywhere else the body value passes through
bit-exactly. The face color is tone-mapped by a view-conditioned 3x3 matrix
before blending.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from ..geom.encoding import positional_encoding, encoding_dim, VIEW_OCTAVES
from ..geom.mesh import TriMesh
from ..geom.meshdist import MeshDistanceField
from ..geom.skinning import Pose, skinning_matrices
from ..geom.template import (SkinnedTemplate, FaceTemplate, Expression,
                             build_body_template, build_hand_template,
                             build_face_template,
                             PART_BODY, PART_LEFT_HAND, PART_RIGHT_HAND, PART_FACE)
from ..nn import ops
from ..nn.mlp import MlpParams, mlp_init, mlp_forward_nodes
from ..nn.tape import Tape, value_of
from .params import ParamBinding
from .body import (BodyField, BodyFieldParams, NodeSet, build_node_set,
                   init_body_params)
from .hand import HandField, HandParams, PosedHand, init_hand_params
from .face import FaceField, FaceParams, TriplaneFeatures, init_face_params

PART_KEYS = (PART_LEFT_HAND, PART_RIGHT_HAND, PART_FACE)
BOX_MARGIN = 0.06  # covers the composition band around part surfaces


# ---------------------------------------------------------------------------
# Piecewise composition formulas (Eq. 14 / Eq. 15 behavior)
# ---------------------------------------------------------------------------

def compose_sdf(s_body, s_part, omega, band_lo: float = -0.05, band_hi: float = 0.025):
    """Banded SDF blend; outside the band the body value is returned bit-exactly."""
    s_body = np.asarray(s_body, dtype=np.float64)
    s_part = np.asarray(s_part, dtype=np.float64)
    in_band = (s_part > band_lo) & (s_part < band_hi)
    return np.where(in_band, omega * s_part + (1.0 - omega) * s_body, s_body)


def compose_color(c_body, c_part, omega, s_part, band_lo: float = -0.05,
                  band_hi: float = 0.025):
    """Banded color blend with the same gate as ``compose_sdf``."""
    c_body = np.asarray(c_body, dtype=np.float64)
    c_part = np.asarray(c_part, dtype=np.float64)
    s_part = np.asarray(s_part, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    in_band = ((s_part > band_lo) & (s_part < band_hi))[..., None]
    om = omega[..., None]
    return np.where(in_band, om * c_part + (1.0 - om) * c_body, c_body)


# ---------------------------------------------------------------------------
# Tone mapping
# ---------------------------------------------------------------------------

@dataclass
class ToneMapParams:
    """Tiny MLP mapping (PE(v_body), PE(v_face)) -> 3x3 matrix M."""

    mlp: MlpParams

    def named_arrays(self, prefix: str = "tone"):
        yield from self.mlp.named_arrays(f"{prefix}.mlp")


def init_tone_map(rng: np.random.Generator, width: int = 32,
                  dtype=np.float32) -> ToneMapParams:
    in_dim = 2 * encoding_dim(3, VIEW_OCTAVES)
    mlp = mlp_init(rng, [in_dim, width, 9], activation="relu", dtype=dtype)
    # Identity initialization: zero final weights, identity bias.
    mlp.weights[-1][:] = 0.0
    mlp.biases[-1][:] = np.eye(3, dtype=dtype).reshape(-1)
    return ToneMapParams(mlp)


def tone_map(params: ToneMapParams, c_face, v_body: np.ndarray, v_face: np.ndarray,
             tape: Optional[Tape] = None, binding: Optional[ParamBinding] = None):
    """Apply the view-conditioned matrix: clamp(M(v_body, v_face) @ c, 0, 1)."""
    binding = binding or ParamBinding(tape)
    pe = np.concatenate([
        positional_encoding(np.atleast_2d(v_body), VIEW_OCTAVES),
        positional_encoding(np.atleast_2d(v_face), VIEW_OCTAVES),
    ], axis=1).astype(params.mlp.weights[0].dtype)
    m_flat = mlp_forward_nodes(params.mlp, pe, tape, binding.mlp("tone.mlp", params.mlp))
    n = pe.shape[0]
    M = ops.reshape(tape, m_flat, (n, 3, 3))
    c = ops.reshape(tape, c_face, (n, 3, 1))
    out = ops.reshape(tape, ops.matmul(tape, M, c), (n, 3))
    return ops.clip(tape, out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Pose-dependent geometry shared by both render paths (cacheable per pose)
# ---------------------------------------------------------------------------

@dataclass
class PoseGeometry:
    pose: Pose
    posed_template: TriMesh
    template_mdf: MeshDistanceField
    posed_hands: Dict[int, PosedHand]
    part_world: Dict[int, np.ndarray]  # part-local -> posed body space
    part_world_inv: Dict[int, np.ndarray]
    part_boxes: Dict[int, tuple]  # part -> (lo, hi) in body space
    token: str


@dataclass
class AvatarSnapshot:
    """Immutable (pose, expression)-conditioned avatar state."""

    geometry: PoseGeometry
    body_state: object  # PoseConditionedState
    face_planes: TriplaneFeatures
    expression: Expression
    parts_enabled: bool
    token: str

    @property
    def pose(self) -> Pose:
        return self.geometry.pose

    def bounds(self, influence_radius: float):
        """Axis-aligned bounds covering nodes + influence and all part boxes."""
        n = value_of(self.body_state.n_posed)
        lo = n.min(axis=0) - influence_radius
        hi = n.max(axis=0) + influence_radius
        if self.parts_enabled:
            for blo, bhi in self.geometry.part_boxes.values():
                lo = np.minimum(lo, blo)
                hi = np.maximum(hi, bhi)
        return lo, hi


class Avatar:
    """Compositional avatar: body + hands + face + tone map, one template."""

    def __init__(self, template: SkinnedTemplate, body: BodyField,
                 hand_left: HandField, hand_right: HandField,
                 face_template: FaceTemplate, face: FaceField,
                 tone: ToneMapParams, config):
        self.template = template
        self.body = body
        self.hand_left = hand_left
        self.hand_right = hand_right
        self.face_template = face_template
        self.face = face
        self.tone = tone
        self.config = config
        labels = template.part_labels.astype(np.int64)
        self._part_onehot = np.eye(4)[labels]
        self._wrist_l = template.skeleton.joint_index("wrist_left")
        self._wrist_r = template.skeleton.joint_index("wrist_right")
        self._head = template.skeleton.joint_index("head")

    # -- parameter registry ----------------------------------------------------

    def load_arrays(self, store: Dict[str, np.ndarray]):
        """Copy parameter values in place from a name -> array mapping."""
        mine = self.named_arrays()
        for name, arr in mine.items():
            if name not in store:
                raise KeyError(f"missing parameter block {name}")
            src = store[name]
            if src.shape != arr.shape:
                raise ValueError(
                    f"parameter {name}: stored shape {src.shape} != expected {arr.shape}")
            np.copyto(arr, src)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, arr in self.body.params.named_arrays("body"):
            out[name] = arr
        for name, arr in self.hand_left.params.named_arrays("hand_l"):
            out[name] = arr
        for name, arr in self.hand_right.params.named_arrays("hand_r"):
            out[name] = arr
        for name, arr in self.face.params.named_arrays("face"):
            out[name] = arr
        for name, arr in self.tone.named_arrays("tone"):
            out[name] = arr
        return out

    def geometry_parameter_names(self):
        prefixes = (BodyFieldParams.geometry_prefixes("body")
                    + FaceParams.geometry_prefixes("face"))
        return [n for n in self.named_arrays() if n.startswith(prefixes)]

    # -- conditioning -----------------------------------------------------------

    def pose_geometry(self, pose: Pose) -> PoseGeometry:
        """Pose-only geometry (posed template, hands, part boxes); cacheable."""
        posed_v, Tj = self.template.posed_vertices(pose)
        mesh = TriMesh(posed_v, self.template.mesh.faces)
        mdf = MeshDistanceField(mesh)
        part_world, part_world_inv, boxes, hands = {}, {}, {}, {}
        for part, wrist, tmat, fieldobj, phi in (
            (PART_LEFT_HAND, self._wrist_l, self.template.hand_left_transform,
             self.hand_left, pose.phi_left),
            (PART_RIGHT_HAND, self._wrist_r, self.template.hand_right_transform,
             self.hand_right, pose.phi_right),
        ):
            world = Tj[wrist] @ tmat
            posed_hand = fieldobj.condition(phi)
            lo, hi = _transformed_bounds(posed_hand.mesh.bounds(), world, BOX_MARGIN)
            part_world[part] = world
            part_world_inv[part] = np.linalg.inv(world)
            boxes[part] = (lo, hi)
            hands[part] = posed_hand
        world = Tj[self._head] @ self.template.face_transform
        part_world[PART_FACE] = world
        part_world_inv[PART_FACE] = np.linalg.inv(world)
        boxes[PART_FACE] = _transformed_bounds(
            np.stack([self.face.box_lo, self.face.box_hi]), world, 0.0)
        token = hashlib.sha1(pose.flat().tobytes() + pose.root.tobytes()
                             + pose.beta.tobytes()).hexdigest()[:16]
        return PoseGeometry(pose, mesh, mdf, hands, part_world, part_world_inv,
                            boxes, token)

    def condition(self, pose: Pose, expression: Expression,
                  tape: Optional[Tape] = None,
                  binding: Optional[ParamBinding] = None,
                  rng: Optional[np.random.Generator] = None,
                  parts_enabled: bool = True,
                  geometry: Optional[PoseGeometry] = None,
                  face_planes: Optional[TriplaneFeatures] = None) -> AvatarSnapshot:
        binding = binding or ParamBinding(tape)
        if geometry is None or geometry.token != self.pose_geometry_token(pose):
            geometry = self.pose_geometry(pose)
        body_state = self.body.condition(self.template.skeleton, pose, tape,
                                         binding, rng)
        if face_planes is None:
            face_planes = self.face.condition(expression, tape, binding)
        token = hashlib.sha1(
            (geometry.token + body_state.token + face_planes.token
             + str(parts_enabled)).encode()).hexdigest()[:16]
        return AvatarSnapshot(geometry, body_state, face_planes, expression,
                              parts_enabled, token)

    @staticmethod
    def pose_geometry_token(pose: Pose) -> str:
        return hashlib.sha1(pose.flat().tobytes() + pose.root.tobytes()
                            + pose.beta.tobytes()).hexdigest()[:16]

    # -- part weights -----------------------------------------------------------

    def part_blend_weight(self, points: np.ndarray, geometry: PoseGeometry):
        """Project onto the posed template; returns (omega, part tag)."""
        near = geometry.template_mdf.nearest(np.atleast_2d(points))
        mesh = self.template.mesh
        omega = mesh.barycentric_attrib(self.template.part_blend_weights,
                                        near.triangle, near.barycentric)
        onehot = mesh.barycentric_attrib(self._part_onehot, near.triangle,
                                         near.barycentric)
        tag = np.argmax(onehot, axis=1)
        return omega, tag

    # -- composed fields ----------------------------------------------------------

    def composed_sdf(self, points: np.ndarray, snapshot: AvatarSnapshot,
                     tape: Optional[Tape] = None,
                     binding: Optional[ParamBinding] = None,
                     bk=None, counters=None):
        """Full Eq. 14 composition over arbitrary body-space points."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        s, covered = self.body.sdf(pts, snapshot.body_state, tape, binding, bk,
                                   counters)
        if not snapshot.parts_enabled:
            return s, covered
        lo_b, hi_b = self.config.compose_band_lo, self.config.compose_band_hi
        for part in PART_KEYS:
            box_lo, box_hi = snapshot.geometry.part_boxes[part]
            inside = ((pts >= box_lo) & (pts <= box_hi)).all(axis=1)
            if not inside.any():
                continue
            idx = np.nonzero(inside)[0]
            local = _to_local(pts[idx], snapshot.geometry.part_world_inv[part])
            s_part = self._part_sdf(part, local, snapshot, tape, binding, counters)
            sp_val = value_of(s_part)
            in_band = (sp_val > lo_b) & (sp_val < hi_b)
            if not in_band.any():
                continue
            rows = idx[in_band]
            omega, tag = self.part_blend_weight(pts[rows], snapshot.geometry)
            keep = tag == part
            if not keep.any():
                continue
            rows = rows[keep]
            om = omega[keep].astype(value_of(s).dtype)[:, None]
            sp_rows = _take(tape, s_part, np.nonzero(in_band)[0][keep])
            sb_rows = ops.gather_rows(tape, s, rows)
            blended = ops.add(
                tape,
                ops.mul(tape, ops.reshape(tape, sp_rows, (len(rows),)), om[:, 0]),
                ops.mul(tape, sb_rows, (1.0 - om[:, 0])),
            )
            s = ops.assign_rows(tape, s, rows, blended)
            covered[rows] = True
        return s, covered

    def composed_color(self, points: np.ndarray, viewdirs: np.ndarray,
                       snapshot: AvatarSnapshot, tape: Optional[Tape] = None,
                       binding: Optional[ParamBinding] = None,
                       bk=None, counters=None):
        """Full Eq. 15 composition (face tone-mapped before blending)."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(viewdirs, dtype=np.float64))
        rgb, covered = self.body.color(pts, dirs, snapshot.body_state, tape,
                                       binding, bk, counters)
        if not snapshot.parts_enabled:
            return rgb, covered
        lo_b, hi_b = self.config.compose_band_lo, self.config.compose_band_hi
        for part in PART_KEYS:
            box_lo, box_hi = snapshot.geometry.part_boxes[part]
            inside = ((pts >= box_lo) & (pts <= box_hi)).all(axis=1)
            if not inside.any():
                continue
            idx = np.nonzero(inside)[0]
            world_inv = snapshot.geometry.part_world_inv[part]
            local = _to_local(pts[idx], world_inv)
            s_part = value_of(self._part_sdf(part, local, snapshot, tape=None,
                                             binding=None, counters=None))
            in_band = (s_part > lo_b) & (s_part < hi_b)
            if not in_band.any():
                continue
            sub = np.nonzero(in_band)[0]
            rows = idx[sub]
            omega, tag = self.part_blend_weight(pts[rows], snapshot.geometry)
            keep = tag == part
            if not keep.any():
                continue
            rows = rows[keep]
            sub = sub[keep]
            local_k = local[sub]
            if part == PART_FACE:
                vdir_local = dirs[rows] @ world_inv[:3, :3].T
                c_part = self.face.color(local_k, vdir_local, snapshot.face_planes,
                                         tape, binding, counters)
                c_part = tone_map(self.tone, c_part, dirs[rows], vdir_local,
                                  tape, binding)
            else:
                posed = snapshot.geometry.posed_hands[part]
                fieldobj = self.hand_left if part == PART_LEFT_HAND else self.hand_right
                prefix = "hand_l" if part == PART_LEFT_HAND else "hand_r"
                c_part = fieldobj.color(local_k, posed, tape, binding, prefix,
                                        counters)
            om = omega[keep].astype(value_of(rgb).dtype)[:, None]
            cb_rows = ops.gather_rows(tape, rgb, rows)
            blended = ops.add(tape, ops.mul(tape, c_part, om),
                              ops.mul(tape, cb_rows, 1.0 - om))
            rgb = ops.assign_rows(tape, rgb, rows, blended)
            covered[rows] = True
        return rgb, covered

    def _part_sdf(self, part: int, local_points: np.ndarray,
                  snapshot: AvatarSnapshot, tape, binding, counters):
        if part == PART_FACE:
            return self.face.sdf(local_points, snapshot.face_planes, tape,
                                 binding, counters)
        posed = snapshot.geometry.posed_hands[part]
        fieldobj = self.hand_left if part == PART_LEFT_HAND else self.hand_right
        return fieldobj.sdf(local_points, posed, counters).astype(
            self.body.dtype)


def _transformed_bounds(bounds: np.ndarray, world: np.ndarray, margin: float):
    corners = np.array([[bounds[i, 0], bounds[j, 1], bounds[k, 2]]
                        for i in range(2) for j in range(2) for k in range(2)])
    wc = corners @ world[:3, :3].T + world[:3, 3]
    return wc.min(axis=0) - margin, wc.max(axis=0) + margin


def _to_local(points: np.ndarray, world_inv: np.ndarray) -> np.ndarray:
    return points @ world_inv[:3, :3].T + world_inv[:3, 3]


def _take(tape, x, idx):
    if len(idx) == value_of(x).shape[0]:
        return x
    return ops.gather_rows(tape, x, idx)


# ---------------------------------------------------------------------------
# Avatar factory
# ---------------------------------------------------------------------------

def build_avatar(config, dtype=np.float32) -> Avatar:
    """Construct a fresh avatar (templates + initialized parameters)."""
    rng = np.random.default_rng(config.seed)
    template = build_body_template(config.template)
    hand_l_tmpl = build_hand_template(config.template, "left")
    hand_r_tmpl = build_hand_template(config.template, "right")
    face_tmpl = build_face_template(config.template)
    node_set = build_node_set(template, config.body)
    pose_dim = len(Pose.identity(template.skeleton).flat())
    body_params = init_body_params(rng, config.body, pose_dim, dtype=dtype)
    body = BodyField(node_set, body_params)
    hand_l = HandField(init_hand_params(rng, hand_l_tmpl, config.hand, False, dtype=dtype))
    hand_r = HandField(init_hand_params(rng, hand_r_tmpl, config.hand, True, dtype=dtype))
    face = FaceField(face_tmpl, init_face_params(rng, config.face, dtype=dtype))
    tone = init_tone_map(rng, config.tone_width, dtype=dtype)
    return Avatar(template, body, hand_l, hand_r, face_tmpl, face, tone, config)
