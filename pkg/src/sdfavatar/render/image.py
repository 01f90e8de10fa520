"""Image container plus PNG and raw-float interchange.

The raw dump is for bit-exact golden tests: a 16-byte header
(magic ``SDFI``, u16 version, u16 reserved, u32 width, u32 height) followed
by row-major RGB float32, little-endian.
"""

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

RAW_MAGIC = b"SDFI"
RAW_VERSION = 1


@dataclass
class Image:
    """Float RGB image in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def mean_abs_difference(self, other: "Image") -> float:
        return float(np.abs(self.pixels - other.pixels).mean())


def save_png(image: Image, path: str):
    PILImage.fromarray(image.to_uint8(), mode="RGB").save(path, format="PNG")


def png_bytes(image: Image) -> bytes:
    import io

    buf = io.BytesIO()
    PILImage.fromarray(image.to_uint8(), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(path: str) -> Image:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr)


def save_raw_float(image: Image, path: str):
    header = RAW_MAGIC + struct.pack("<HHII", RAW_VERSION, 0,
                                     image.width, image.height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(image.pixels.astype("<f4").tobytes())


def load_raw_float(path: str) -> Image:
    with open(path, "rb") as f:
        header = f.read(16)
        if header[:4] != RAW_MAGIC:
            raise ValueError("not a raw float image file")
        version, _, width, height = struct.unpack("<HHII", header[4:])
        if version > RAW_VERSION:
            raise ValueError(f"raw image version {version} too new")
        data = np.frombuffer(f.read(width * height * 12), dtype="<f4")
    return Image(data.reshape(height, width, 3).copy())
