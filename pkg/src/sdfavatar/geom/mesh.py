"""Indexed triangle meshes: normals, watertightness, area sampling."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass
class TriMesh:
    """Triangle mesh with float64 vertices (meters) and int32 face triples."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int32

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("faces index invalid vertices")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens < 1e-300] = 1.0
        return n / lens

    @cached_property
    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @cached_property
    def vertex_pseudo_normals(self) -> np.ndarray:
        """Angle-weighted vertex normals (Baerentzen-Aanaes pseudo-normals).

        Interpolating these barycentrically gives the normal used for the
        inside/outside sign test on watertight meshes.
        """
        normals = np.zeros_like(self.vertices)
        v = self.vertices
        f = self.faces
        for k in range(3):
            i0 = f[:, k]
            i1 = f[:, (k + 1) % 3]
            i2 = f[:, (k + 2) % 3]
            e1 = v[i1] - v[i0]
            e2 = v[i2] - v[i0]
            e1 = e1 / np.maximum(np.linalg.norm(e1, axis=1, keepdims=True), 1e-300)
            e2 = e2 / np.maximum(np.linalg.norm(e2, axis=1, keepdims=True), 1e-300)
            angles = np.arccos(np.clip((e1 * e2).sum(axis=1), -1.0, 1.0))
            np.add.at(normals, i0, self.face_normals * angles[:, None])
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        lens[lens < 1e-300] = 1.0
        return normals / lens

    def is_watertight(self) -> bool:
        """True if every edge is shared by exactly two opposed half-edges."""
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        keys = np.sort(edges, axis=1)
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        if not (counts == 2).all():
            return False
        # Opposite orientation: each directed edge appears exactly once.
        directed = edges[:, 0].astype(np.int64) * len(self.vertices) + edges[:, 1]
        return len(np.unique(directed)) == len(directed)

    def bounds(self) -> np.ndarray:
        """(2, 3) array of [min, max] corners."""
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def transformed(self, matrix: np.ndarray) -> "TriMesh":
        """Apply a 4x4 homogeneous transform to a copy of the mesh."""
        m = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        return TriMesh(v, self.faces.copy())

    def barycentric_points(self, tri_idx: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Interpolate surface points at (tri, (u,v,w)) pairs."""
        tri = self.faces[np.asarray(tri_idx, dtype=np.int64)]
        b = np.asarray(bary, dtype=np.float64)
        return (
            self.vertices[tri[:, 0]] * b[:, 0:1]
            + self.vertices[tri[:, 1]] * b[:, 1:2]
            + self.vertices[tri[:, 2]] * b[:, 2:3]
        )

    def barycentric_attrib(self, attrib: np.ndarray, tri_idx, bary) -> np.ndarray:
        """Interpolate a per-vertex attribute array (V, D) or (V,)."""
        a = np.asarray(attrib)
        tri = self.faces[np.asarray(tri_idx, dtype=np.int64)]
        b = np.asarray(bary, dtype=np.float64)
        if a.ndim == 1:
            return a[tri[:, 0]] * b[:, 0] + a[tri[:, 1]] * b[:, 1] + a[tri[:, 2]] * b[:, 2]
        return (
            a[tri[:, 0]] * b[:, 0:1] + a[tri[:, 1]] * b[:, 1:2] + a[tri[:, 2]] * b[:, 2:3]
        )
