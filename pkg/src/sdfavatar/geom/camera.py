"""Pinhole / orthographic cameras and ray generation."""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

PERSPECTIVE = "perspective"
ORTHOGRAPHIC = "orthographic"


@dataclass(frozen=True)
class Camera:
    """World-to-camera rigid transform plus pixel intrinsics.

    Camera space follows the usual convention: +x right, +y down, +z forward
    (the viewing axis). ``rotation @ p_world + translation`` maps into camera
    space. For orthographic cameras ``fx``/``fy`` act as pixels-per-meter.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int
    kind: str = PERSPECTIVE

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal")
        if self.kind not in (PERSPECTIVE, ORTHOGRAPHIC):
            raise ValueError(f"unknown projection kind {self.kind!r}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing axis (+z of camera space) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def to_dict(self) -> dict:
        return {
            "fx_px": self.fx,
            "fy_px": self.fy,
            "cx_px": self.cx,
            "cy_px": self.cy,
            "rotation": self.rotation.tolist(),
            "translation_m": self.translation.tolist(),
            "width_px": self.width,
            "height_px": self.height,
            "kind": self.kind,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx_px"]),
            fy=float(d["fy_px"]),
            cx=float(d["cx_px"]),
            cy=float(d["cy_px"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation_m"], dtype=np.float64),
            width=int(d["width_px"]),
            height=int(d["height_px"]),
            kind=d.get("kind", PERSPECTIVE),
        )


def look_at(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray = (0.0, 1.0, 0.0),
    *,
    fov_deg: float = 45.0,
    width: int = 256,
    height: int = 256,
    kind: str = PERSPECTIVE,
    ortho_half_extent: float = 1.0,
) -> Camera:
    """Build a camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        upv = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)  # +y is down in camera space
    rot = np.stack([right, down, fwd], axis=0)
    trans = -rot @ eye
    if kind == PERSPECTIVE:
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) * 0.5)
        fx = fy = f
    else:
        fx = 0.5 * width / ortho_half_extent
        fy = 0.5 * height / ortho_half_extent
    return Camera(
        fx=fx,
        fy=fy,
        cx=(width - 1) * 0.5,
        cy=(height - 1) * 0.5,
        rotation=rot,
        translation=trans,
        width=width,
        height=height,
        kind=kind,
    )


def generate_rays(camera: Camera, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rays through the centers of integer ``pixels`` (N, 2) given as (x, y).

    Returns ``(origins, directions)`` with unit directions, both (N, 3)
    float64 in world space.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if ((px[:, 0] < 0) | (px[:, 0] >= camera.width) | (px[:, 1] < 0) | (px[:, 1] >= camera.height)).any():
        raise ValueError("pixel outside image bounds")
    x = (px[:, 0] - camera.cx) / camera.fx
    y = (px[:, 1] - camera.cy) / camera.fy
    rt = camera.rotation.T
    if camera.kind == PERSPECTIVE:
        dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
        dirs = dirs_cam @ rt.T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(camera.center, dirs.shape).copy()
    else:
        origins_cam = np.stack([x, y, np.zeros_like(x)], axis=1)
        origins = origins_cam @ rt.T + camera.center
        dirs = np.broadcast_to(camera.forward, origins.shape).copy()
    return origins, dirs


def generate_all_rays(camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel, row-major; shapes (H*W, 3)."""
    ys, xs = np.mgrid[0 : camera.height, 0 : camera.width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return generate_rays(camera, pixels)


def project(camera: Camera, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project world points; returns ((N,2) pixel coords, (N,) depth along view axis)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = p @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    if camera.kind == PERSPECTIVE:
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.fx * pc[:, 0] / z + camera.cx
            v = camera.fy * pc[:, 1] / z + camera.cy
    else:
        u = camera.fx * pc[:, 0] + camera.cx
        v = camera.fy * pc[:, 1] + camera.cy
    return np.stack([u, v], axis=1), z
