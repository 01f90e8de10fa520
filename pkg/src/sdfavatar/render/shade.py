"""Deferred pipeline step III (pixel shading) and the full three-step render."""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..geom.camera import Camera, generate_all_rays
from ..counters import Counters
from .volume import SdfVolume, reconstruct_sdf_volume, raycast_pointmap, PointMap
from .image import Image


@dataclass
class DeferredResult:
    image: Image
    pointmap: PointMap
    volume: SdfVolume
    timings_ms: dict
    counters: Counters

    @property
    def color_evaluations(self) -> int:
        return self.counters.color_evaluations()


def shade(pointmap: PointMap, avatar, snapshot, camera: Camera, config,
          counters: Optional[Counters] = None) -> Image:
    """Color the point-map hits through the composed color field."""
    if pointmap.token and snapshot.token and pointmap.token != snapshot.token:
        raise ValueError("point map was produced from a different avatar snapshot")
    counters = counters if counters is not None else Counters()
    h, w = pointmap.hit.shape
    if (h, w) != (camera.height, camera.width):
        raise ValueError("point map dimensions do not match the camera")
    out = np.empty((h, w, 3), dtype=np.float32)
    out[:] = np.asarray(config.background, dtype=np.float32)
    hit = pointmap.hit.reshape(-1)
    if hit.any():
        origins, dirs = generate_all_rays(camera)
        pts = pointmap.position.reshape(-1, 3)[hit]
        vd = dirs[hit]
        rgb, covered = avatar.composed_color(pts, vd, snapshot, counters=counters)
        rgb = np.asarray(rgb, dtype=np.float32)
        rgb[~covered] = np.asarray(config.background, dtype=np.float32)
        out.reshape(-1, 3)[hit] = rgb
    return Image(out)


def render_deferred(avatar, snapshot, camera: Camera, config,
                    volume: Optional[SdfVolume] = None) -> DeferredResult:
    """Geometry reconstruction -> point-map raycast -> pixel shading."""
    counters = Counters()
    timings = {}
    t0 = time.perf_counter()
    if volume is None or volume.token != snapshot.token:
        volume = reconstruct_sdf_volume(avatar, snapshot, config, counters)
    timings["geometry_ms"] = (time.perf_counter() - t0) * 1000
    t1 = time.perf_counter()
    boxes = snapshot.geometry.part_boxes if snapshot.parts_enabled else None
    pointmap = raycast_pointmap(volume, camera, config, part_boxes=boxes)
    counters.add("raycast_pixels", camera.width * camera.height)
    counters.add("raycast_hits", pointmap.n_hit)
    timings["pointmap_ms"] = (time.perf_counter() - t1) * 1000
    t2 = time.perf_counter()
    image = shade(pointmap, avatar, snapshot, camera, config, counters)
    timings["shading_ms"] = (time.perf_counter() - t2) * 1000
    timings["total_ms"] = (time.perf_counter() - t0) * 1000
    return DeferredResult(image=image, pointmap=pointmap, volume=volume,
                          timings_ms=timings, counters=counters)


def render_volume_image(avatar, snapshot, camera: Camera, config,
                        gamma: Optional[float] = None,
                        counters: Optional[Counters] = None) -> Image:
    """Full-frame volume-rendered image (the training path, used by bench
    and the render service's `volume` mode)."""
    from .volrend import volume_render

    counters = counters if counters is not None else Counters()
    origins, dirs = generate_all_rays(camera)
    out = np.empty((camera.height * camera.width, 3), dtype=np.float32)
    chunk = 16384
    for s in range(0, len(origins), chunk):
        res = volume_render(avatar, snapshot, origins[s:s + chunk],
                            dirs[s:s + chunk],
                            gamma if gamma is not None else config.gamma,
                            n_samples=config.volume_samples,
                            background=config.background, counters=counters)
        out[s:s + chunk] = np.asarray(res["rgb"], dtype=np.float32)
    return Image(out.reshape(camera.height, camera.width, 3))
