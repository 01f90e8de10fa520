"""Skeleton trees, poses, and linear blend skinning."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for a batch of axis-angle vectors (..., 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=-1)
    out = np.tile(np.eye(3), (len(aa), 1, 1))
    nz = theta > 1e-12
    if nz.any():
        k = aa[nz] / theta[nz, None]
        kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
        zero = np.zeros_like(kx)
        K = np.stack(
            [zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1
        ).reshape(-1, 3, 3)
        s = np.sin(theta[nz])[:, None, None]
        c = np.cos(theta[nz])[:, None, None]
        out[nz] = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    return out[0] if single else out


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for root
    rest_offset: np.ndarray  # (3,) translation from parent joint in rest pose
    hinge_axis: Optional[np.ndarray] = None  # set for 1-dof finger joints


@dataclass
class Skeleton:
    """A tree of joints; `body_joints` come first, finger joints after."""

    joints: List[Joint]
    n_body_joints: int
    n_finger_joints_per_hand: int = 15
    n_hands: int = 2

    def __post_init__(self):
        for j, joint in enumerate(self.joints):
            if joint.parent >= j:
                raise ValueError("joints must be topologically ordered (parent before child)")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def rest_world_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for i, j in enumerate(self.joints):
            base = pos[j.parent] if j.parent >= 0 else 0.0
            pos[i] = base + j.rest_offset
        return pos

    def world_transforms(self, local_rot: np.ndarray, root: np.ndarray) -> np.ndarray:
        """Compose per-joint local rotations into world 4x4 transforms.

        ``local_rot``: (J, 3, 3) rotation applied at each joint about its rest
        position; ``root``: (4, 4) global rigid transform applied on top.
        """
        J = self.n_joints
        world = np.zeros((J, 4, 4))
        rest = self.rest_world_positions()
        for i, j in enumerate(self.joints):
            local = np.eye(4)
            local[:3, :3] = local_rot[i]
            off = j.rest_offset if j.parent >= 0 else rest[i]
            local[:3, 3] = off
            if j.parent >= 0:
                world[i] = world[j.parent] @ local
            else:
                world[i] = root @ local
        return world


@dataclass
class Pose:
    """Driving signal: body joint angles, finger angles, shape, root transform.

    ``theta`` is (n_body_joints, 3) axis-angle per body joint; ``phi_left`` /
    ``phi_right`` are (15,) hinge angles (radians); ``beta`` holds template
    shape coefficients used only by pose refinement.
    """

    theta: np.ndarray
    phi_left: np.ndarray
    phi_right: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    root: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.phi_left = np.asarray(self.phi_left, dtype=np.float64).reshape(-1)
        self.phi_right = np.asarray(self.phi_right, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.root = np.asarray(self.root, dtype=np.float64)
        for arr in (self.theta, self.phi_left, self.phi_right, self.beta, self.root):
            if not np.isfinite(arr).all():
                raise ValueError("pose contains non-finite values")

    @staticmethod
    def identity(skeleton: "Skeleton", n_beta: int = 0) -> "Pose":
        return Pose(
            theta=np.zeros((skeleton.n_body_joints, 3)),
            phi_left=np.zeros(skeleton.n_finger_joints_per_hand),
            phi_right=np.zeros(skeleton.n_finger_joints_per_hand),
            beta=np.zeros(n_beta),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.phi_left, self.phi_right])

    def to_dict(self) -> dict:
        return {
            "theta_rad": self.theta.tolist(),
            "phi_left_rad": self.phi_left.tolist(),
            "phi_right_rad": self.phi_right.tolist(),
            "beta": self.beta.tolist(),
            "root": self.root.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        return Pose(
            theta=np.asarray(d["theta_rad"], dtype=np.float64),
            phi_left=np.asarray(d["phi_left_rad"], dtype=np.float64),
            phi_right=np.asarray(d["phi_right_rad"], dtype=np.float64),
            beta=np.asarray(d.get("beta", []), dtype=np.float64),
            root=np.asarray(d.get("root", np.eye(4).tolist()), dtype=np.float64),
        )


def local_rotations(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Per-joint local rotations for a pose; finger joints rotate about their hinge."""
    nb = skeleton.n_body_joints
    if pose.theta.shape != (nb, 3):
        raise ValueError(
            f"pose theta shape {pose.theta.shape} does not match skeleton ({nb}, 3)"
        )
    nf = skeleton.n_finger_joints_per_hand
    if len(pose.phi_left) != nf or len(pose.phi_right) != nf:
        raise ValueError("finger angle count does not match skeleton")
    rots = np.zeros((skeleton.n_joints, 3, 3))
    rots[:nb] = axis_angle_to_matrix(pose.theta)
    phi = np.concatenate([pose.phi_left, pose.phi_right])[: skeleton.n_hands * nf]
    for k, angle in enumerate(phi):
        j = nb + k
        axis = skeleton.joints[j].hinge_axis
        if axis is None:
            axis = np.array([1.0, 0.0, 0.0])
        rots[j] = axis_angle_to_matrix(np.asarray(axis) * angle)
    return rots


def skinning_matrices(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Per-joint skinning transforms T_j = world_j @ inv(rest_world_j), (J, 4, 4)."""
    rots = local_rotations(skeleton, pose)
    world = skeleton.world_transforms(rots, pose.root)
    rest = skeleton.rest_world_positions()
    T = world.copy()
    # inv(rest_world) is a pure translation by -rest position.
    T[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], rest)
    return T


def lbs_pose(vertices: np.ndarray, skin_weights: np.ndarray, skeleton: Skeleton, pose: Pose):
    """Linear blend skinning: returns (posed vertices, per-joint matrices T).

    ``posed_v[i] = sum_j w[i, j] * (T_j @ v[i])``.
    """
    T = skinning_matrices(skeleton, pose)
    v = np.asarray(vertices, dtype=np.float64)
    w = np.asarray(skin_weights, dtype=np.float64)
    if w.shape != (len(v), skeleton.n_joints):
        raise ValueError(
            f"skin weight shape {w.shape} does not match (V={len(v)}, J={skeleton.n_joints})"
        )
    # Blend matrices per vertex: (V, 12) = (V, J) @ (J, 12), then apply.
    flat = T[:, :3, :].reshape(skeleton.n_joints, 12)
    blended = (w @ flat).reshape(len(v), 3, 4)
    posed = np.einsum("vab,vb->va", blended[:, :, :3], v) + blended[:, :, 3]
    return posed, T


def blend_vertex_matrices(skin_weights: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Blend per-joint 4x4 matrices into per-row transforms (R, 4, 4)."""
    w = np.asarray(skin_weights, dtype=np.float64)
    flat = T.reshape(len(T), 16)
    return (w @ flat).reshape(len(w), 4, 4)
