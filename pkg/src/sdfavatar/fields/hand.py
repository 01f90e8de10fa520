"""Template-anchored hand field: analytic posed-mesh SDF geometry plus a
canonical-space color MLP conditioned on the pose.

Geometry is exactly the signed distance of the LBS-posed hand mesh
(barycentric nearest-point projection with pseudo-normal sign). Color looks
up the nearest posed surface point, maps it to the canonical mesh through the
shared (triangle, barycentric) coordinates, and decodes
``sigmoid(MLP(PE(canonical point), posed normal, sdf, PE(phi)))``.
"""

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geom.encoding import positional_encoding, encoding_dim, COORD_OCTAVES
from ..geom.mesh import TriMesh
from ..geom.meshdist import MeshDistanceField
from ..geom.skinning import Pose, lbs_pose
from ..geom.template import SkinnedTemplate
from ..nn import ops
from ..nn.mlp import MlpParams, mlp_init, mlp_forward_nodes
from ..nn.tape import Tape
from .params import ParamBinding

PHI_OCTAVES = 2  # positional encoding octaves for the 15-angle pose vector


@dataclass
class HandFieldConfig:
    color_width: int = 64
    color_layers: int = 3


@dataclass
class HandParams:
    template: SkinnedTemplate  # canonical watertight hand (hand-local frame)
    color_mlp: MlpParams
    mirrored: bool = False  # right hand

    def named_arrays(self, prefix: str):
        yield from self.color_mlp.named_arrays(f"{prefix}.color")


def init_hand_params(rng: np.random.Generator, template: SkinnedTemplate,
                     config: HandFieldConfig, mirrored: bool,
                     dtype=np.float32) -> HandParams:
    n_phi = template.skeleton.n_finger_joints_per_hand
    in_dim = (encoding_dim(3, COORD_OCTAVES) + 3 + 1
              + encoding_dim(n_phi, PHI_OCTAVES))
    dims = [in_dim] + [config.color_width] * (config.color_layers - 1) + [3]
    return HandParams(template, mlp_init(rng, dims, activation="relu", dtype=dtype),
                      mirrored)


@dataclass
class PosedHand:
    """Immutable per-pose snapshot: posed mesh + BVH + pose encoding."""

    phi: np.ndarray
    mesh: TriMesh
    mdf: MeshDistanceField
    token: str


class HandField:
    def __init__(self, params: HandParams):
        self.params = params
        self._canonical_mdf = MeshDistanceField(params.template.mesh)

    @property
    def canonical_mesh(self) -> TriMesh:
        return self.params.template.mesh

    def condition(self, phi: np.ndarray) -> PosedHand:
        tmpl = self.params.template
        pose = Pose(theta=np.zeros((tmpl.skeleton.n_body_joints, 3)),
                    phi_left=phi, phi_right=np.zeros_like(phi))
        # The standalone hand skeleton stores all hinges in the "left" slot.
        posed_v, _ = lbs_pose(tmpl.mesh.vertices, tmpl.skin_weights,
                              tmpl.skeleton, pose)
        mesh = TriMesh(posed_v, tmpl.mesh.faces)
        token = hashlib.sha1(np.asarray(phi).tobytes()
                             + str(id(self.params)).encode()).hexdigest()[:16]
        return PosedHand(np.asarray(phi, dtype=np.float64), mesh,
                         MeshDistanceField(mesh), token)

    def sdf(self, points: np.ndarray, posed: PosedHand, counters=None) -> np.ndarray:
        """Mesh signed distance on the posed hand (delegates to geomcore)."""
        if counters is not None:
            counters.add("hand_sdf_points", len(np.atleast_2d(points)))
        return posed.mdf.signed_distance(points)

    def color(self, points: np.ndarray, posed: PosedHand,
              tape: Optional[Tape] = None, binding: Optional[ParamBinding] = None,
              prefix: str = "hand", counters=None):
        """Canonical-anchored pose-dependent color in [0,1]^3."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if counters is not None:
            counters.add("hand_color_points", len(pts))
        sd, _, normals = posed.mdf.signed_distance(pts, with_features=True)
        near = posed.mdf.nearest(pts)
        canonical = self.canonical_mesh.barycentric_points(near.triangle,
                                                           near.barycentric)
        pe_m = positional_encoding(canonical, COORD_OCTAVES)
        pe_phi = positional_encoding(posed.phi, PHI_OCTAVES)
        x = np.concatenate(
            [pe_m, normals, sd[:, None],
             np.broadcast_to(pe_phi, (len(pts), pe_phi.shape[-1]))], axis=1
        ).astype(self.params.color_mlp.weights[0].dtype)
        mlp = self.params.color_mlp
        logits = mlp_forward_nodes(mlp, x, tape, binding.mlp(f"{prefix}.color", mlp))
        return ops.sigmoid(tape, logits)
