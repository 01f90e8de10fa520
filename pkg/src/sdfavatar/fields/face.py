"""Triplane-conditioned face field.

The expression proxy mesh (neutral + blendshape displacements) is rasterized
orthographically from the front and both sides at 256x256; three independent
convolutional encoders turn those renders into 64x64 feature planes; SDF and
color decoders read pixel-aligned bilinear features plus positional-encoded
coordinates. Outside the face box the SDF falls back to
``distance_to_box + margin`` so it can never enter the composition band.
"""

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit

from ..geom.encoding import positional_encoding, encoding_dim, COORD_OCTAVES, VIEW_OCTAVES
from ..geom.mesh import TriMesh
from ..geom.template import FaceTemplate, Expression
from ..nn import ops
from ..nn.mlp import MlpParams, mlp_init, mlp_forward_nodes
from ..nn.conv import ConvNetParams, conv_net_init, conv_forward, bilinear_sample
from ..nn.conv import RESAMPLE_DOWN, RESAMPLE_NONE
from ..nn.tape import Tape, value_of
from .params import ParamBinding

VIEW_FRONT, VIEW_LEFT, VIEW_RIGHT = 0, 1, 2
PROXY_CHANNELS = 4  # rgb + normalized depth


@dataclass
class FaceFieldConfig:
    proxy_resolution: int = 256
    plane_resolution: int = 64
    plane_channels: int = 8
    encoder_hidden: tuple = (8, 16)
    decoder_width: int = 64
    outside_margin: float = 0.03  # keeps the fallback clear of the blend band


@dataclass
class FaceParams:
    geo_encoders: List[ConvNetParams]  # one per view
    col_encoders: List[ConvNetParams]
    geo_mlp: MlpParams
    col_mlp: MlpParams
    config: FaceFieldConfig

    def named_arrays(self, prefix: str):
        for v, enc in enumerate(self.geo_encoders):
            yield from enc.named_arrays(f"{prefix}.geo_enc{v}")
        for v, enc in enumerate(self.col_encoders):
            yield from enc.named_arrays(f"{prefix}.col_enc{v}")
        yield from self.geo_mlp.named_arrays(f"{prefix}.geo_mlp")
        yield from self.col_mlp.named_arrays(f"{prefix}.col_mlp")

    @staticmethod
    def geometry_prefixes(prefix: str = "face"):
        return tuple(f"{prefix}.geo_enc{v}" for v in range(3)) + (f"{prefix}.geo_mlp",)


def init_face_params(rng: np.random.Generator, config: FaceFieldConfig,
                     dtype=np.float32) -> FaceParams:
    c = config
    chans = [PROXY_CHANNELS, *c.encoder_hidden, c.plane_channels]
    # 256 -> 128 -> 64 via average pooling after the first two convs.
    resample = [RESAMPLE_DOWN, RESAMPLE_DOWN] + [RESAMPLE_NONE] * (len(chans) - 3)
    geo_encoders = [conv_net_init(rng, chans, resample=resample, dtype=dtype)
                    for _ in range(3)]
    col_encoders = [conv_net_init(rng, chans, resample=resample, dtype=dtype)
                    for _ in range(3)]
    pe_p = encoding_dim(3, COORD_OCTAVES)
    pe_v = encoding_dim(3, VIEW_OCTAVES)
    geo_mlp = mlp_init(rng, [pe_p + 3 * c.plane_channels, c.decoder_width,
                             c.decoder_width, 1], activation="elu", dtype=dtype)
    geo_mlp.biases[-1][:] = 0.03
    col_mlp = mlp_init(rng, [pe_p + pe_v + 3 * c.plane_channels, c.decoder_width,
                             c.decoder_width, 3], activation="relu", dtype=dtype)
    return FaceParams(geo_encoders, col_encoders, geo_mlp, col_mlp, config)


@dataclass
class TriplaneFeatures:
    """Per-expression immutable snapshot of the three feature planes."""

    geo_planes: object  # (3, C, R, R) Node or ndarray
    col_planes: object
    proxy_images: np.ndarray  # (3, 256, 256, 4) encoder inputs
    token: str


# ---------------------------------------------------------------------------
# Orthographic proxy rasterization
# ---------------------------------------------------------------------------

@njit(cache=True)
def _raster_kernel(v2d, depth, color, faces, img, zbuf):
    h, w = img.shape[0], img.shape[1]
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = v2d[i0, 0], v2d[i0, 1]
        x1, y1 = v2d[i1, 0], v2d[i1, 1]
        x2, y2 = v2d[i2, 0], v2d[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)))), w - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)))), h - 1)
        inv = 1.0 / area
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                u = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv
                v = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv
                wgt = 1.0 - u - v
                if u < -1e-9 or v < -1e-9 or wgt < -1e-9:
                    continue
                z = u * depth[i0] + v * depth[i1] + wgt * depth[i2]
                if z > zbuf[py, px]:
                    zbuf[py, px] = z
                    for c in range(3):
                        img[py, px, c] = (u * color[i0, c] + v * color[i1, c]
                                          + wgt * color[i2, c])
                    img[py, px, 3] = z


# View projections: rows select the (u, v) axes of face-local coordinates and
# `depth_sign * remaining axis` is the toward-viewer depth.
_VIEW_AXES = {
    VIEW_FRONT: ((0, 1), 2, 1.0),   # u=x, v=y, viewer at +z
    VIEW_LEFT: ((2, 1), 0, -1.0),   # u=z, v=y, viewer at -x
    VIEW_RIGHT: ((2, 1), 0, 1.0),   # u=z (mirrored via depth), viewer at +x
}


def _plane_uv(points: np.ndarray, view: int, box_lo, box_hi, res: int) -> np.ndarray:
    (au, av), ad, sgn = _VIEW_AXES[view]
    u = points[..., au]
    v = points[..., av]
    if view == VIEW_RIGHT:
        u = box_lo[au] + box_hi[au] - u  # mirror so the plane reads left-to-right
    su = (res - 1) / (box_hi[au] - box_lo[au])
    sv = (res - 1) / (box_hi[av] - box_lo[av])
    # v axis flipped: image rows grow downward while +y is up.
    return np.stack([(u - box_lo[au]) * su,
                     (box_hi[av] - v) * sv], axis=-1)


def render_orthographic_proxy(mesh: TriMesh, albedo: np.ndarray,
                              box_lo: np.ndarray, box_hi: np.ndarray,
                              resolution: int = 256) -> np.ndarray:
    """Rasterize the proxy from front/left/right; returns (3, R, R, 4)
    channels-last float32 images (rgb + depth in [0,1], zeros background)."""
    if mesh.n_faces == 0:
        raise ValueError("cannot rasterize an empty mesh")
    out = np.zeros((3, resolution, resolution, 4), dtype=np.float64)
    for view in (VIEW_FRONT, VIEW_LEFT, VIEW_RIGHT):
        (au, av), ad, sgn = _VIEW_AXES[view]
        v2d = _plane_uv(mesh.vertices, view, box_lo, box_hi, resolution)
        depth_raw = sgn * mesh.vertices[:, ad]
        lo = sgn * (box_lo[ad] if sgn > 0 else box_hi[ad])
        span = box_hi[ad] - box_lo[ad]
        depth = (depth_raw - lo) / span  # toward-viewer in [0, 1]-ish
        zbuf = np.full((resolution, resolution), -1e30)
        _raster_kernel(np.ascontiguousarray(v2d),
                       np.ascontiguousarray(depth),
                       np.ascontiguousarray(albedo, dtype=np.float64),
                       mesh.faces.astype(np.int64), out[view], zbuf)
    return out.astype(np.float32)


class FaceField:
    def __init__(self, template: FaceTemplate, params: FaceParams):
        self.template = template
        self.params = params
        self.config = params.config
        self.dtype = params.geo_mlp.weights[0].dtype

    @property
    def box_lo(self) -> np.ndarray:
        return self.template.box_lo

    @property
    def box_hi(self) -> np.ndarray:
        return self.template.box_hi

    def condition(self, expression: Expression, tape: Optional[Tape] = None,
                  binding: Optional[ParamBinding] = None) -> TriplaneFeatures:
        """Expression mesh -> proxy renders -> encoder feature planes."""
        binding = binding or ParamBinding(tape)
        mesh = self.template.expression_mesh(expression)
        images = render_orthographic_proxy(mesh, self.template.albedo,
                                           self.box_lo, self.box_hi,
                                           self.config.proxy_resolution)
        images = images.astype(self.dtype)
        geo_planes, col_planes = [], []
        for v in range(3):
            x = images[v][None]
            geo = conv_forward(self.params.geo_encoders[v], x, tape,
                               binding.conv(f"face.geo_enc{v}", self.params.geo_encoders[v]))
            col = conv_forward(self.params.col_encoders[v], x, tape,
                               binding.conv(f"face.col_enc{v}", self.params.col_encoders[v]))
            geo_planes.append(geo)
            col_planes.append(col)
        geo_stack = ops.concat(tape, geo_planes, axis=0)
        col_stack = ops.concat(tape, col_planes, axis=0)
        token = hashlib.sha1(expression.psi.tobytes()
                             + str(id(self.params)).encode()).hexdigest()[:16]
        return TriplaneFeatures(geo_stack, col_stack, images, token)

    def _plane_features(self, tape, planes, points: np.ndarray):
        res = self.config.plane_resolution
        feats = []
        for view in (VIEW_FRONT, VIEW_LEFT, VIEW_RIGHT):
            uv = _plane_uv(points, view, self.box_lo, self.box_hi, res).astype(self.dtype)
            idx = np.full(len(points), view, dtype=np.int64)
            feats.append(bilinear_sample(tape, planes, uv, idx))
        return feats

    def outside_mask(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return ((p < self.box_lo) | (p > self.box_hi)).any(axis=1)

    def fallback_sdf(self, points: np.ndarray) -> np.ndarray:
        """Positive distance-to-box fallback used outside the face box."""
        p = np.atleast_2d(points)
        d = np.maximum(np.maximum(self.box_lo - p, 0.0), p - self.box_hi)
        return (np.linalg.norm(d, axis=1) + self.config.outside_margin).astype(self.dtype)

    def sdf(self, points: np.ndarray, planes: TriplaneFeatures,
            tape: Optional[Tape] = None, binding: Optional[ParamBinding] = None,
            counters=None):
        """Face SDF; points are in face-local coordinates."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        outside = self.outside_mask(pts)
        values = self.fallback_sdf(pts)
        inside = ~outside
        if counters is not None:
            counters.add("face_sdf_points", int(inside.sum()))
        if not inside.any():
            return values
        pin = pts[inside]
        feats = self._plane_features(tape, planes.geo_planes, pin)
        pe = positional_encoding(pin, COORD_OCTAVES).astype(self.dtype)
        x = ops.concat(tape, [pe] + feats, axis=1)
        out = mlp_forward_nodes(self.params.geo_mlp, x, tape,
                                binding.mlp("face.geo_mlp", self.params.geo_mlp))
        out = ops.reshape(tape, out, (len(pin),))
        return ops.assign_rows(tape, values, np.nonzero(inside)[0], out)

    def color(self, points: np.ndarray, viewdirs: np.ndarray,
              planes: TriplaneFeatures, tape: Optional[Tape] = None,
              binding: Optional[ParamBinding] = None, counters=None):
        """Face color in [0,1]^3 (face-local points and view directions)."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(viewdirs, dtype=np.float64))
        if counters is not None:
            counters.add("face_color_points", len(pts))
        feats = self._plane_features(tape, planes.col_planes, pts)
        pe_p = positional_encoding(pts, COORD_OCTAVES).astype(self.dtype)
        pe_v = positional_encoding(dirs, VIEW_OCTAVES).astype(self.dtype)
        x = ops.concat(tape, [pe_p, pe_v] + feats, axis=1)
        logits = mlp_forward_nodes(self.params.col_mlp, x, tape,
                                   binding.mlp("face.col_mlp", self.params.col_mlp))
        return ops.sigmoid(tape, logits)
