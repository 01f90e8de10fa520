"""Compositional SDF avatar engine.

Articulated implicit body/hand/face fields over procedural templates, a
deferred surface-rendering pipeline, a volume-rendering training path, and
two-pass fitting, all on a small numpy/numba runtime.
"""

__version__ = "0.1.0"


def _tune_allocator():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    The hot path churns tens-of-MB buffers per step; default glibc behavior
    hands them back to the kernel on free, so every reallocation pays page
    zeroing (~0.4 ms/MB). Raising the mmap/trim thresholds lets the heap
    recycle them. Best effort: silently skipped off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()

from .config import AvatarConfig, RenderConfig, TrainConfig  # noqa: E402
from .fields.compose import Avatar, build_avatar  # noqa: E402

__all__ = ["AvatarConfig", "RenderConfig", "TrainConfig", "Avatar",
           "build_avatar", "__version__"]
