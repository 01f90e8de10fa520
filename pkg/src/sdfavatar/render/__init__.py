from .volume import SdfVolume, FineBlock, reconstruct_sdf_volume, raycast_pointmap, PointMap
from .volrend import sdf_to_density, volume_render
from .shade import shade, render_deferred, DeferredResult
from .image import Image, save_png, load_png, save_raw_float, load_raw_float

__all__ = [
    "SdfVolume",
    "FineBlock",
    "reconstruct_sdf_volume",
    "raycast_pointmap",
    "PointMap",
    "sdf_to_density",
    "volume_render",
    "shade",
    "render_deferred",
    "DeferredResult",
    "Image",
    "save_png",
    "load_png",
    "save_raw_float",
    "load_raw_float",
]
