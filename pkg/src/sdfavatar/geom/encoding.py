"""Sinusoidal positional encoding for coordinates and view directions."""

import numpy as np

# Octave counts used throughout the engine: 6 for spatial coordinates,
# 4 for view directions.
COORD_OCTAVES = 6
VIEW_OCTAVES = 4


def positional_encoding(x: np.ndarray, m: int) -> np.ndarray:
    """Encode ``x`` as ``(x, sin x, cos x, ..., sin 2^{m-1} x, cos 2^{m-1} x)``.

    ``x`` may be a vector ``(d,)`` or a batch ``(..., d)``; the encoding is
    applied to the last axis, producing ``d * (2m + 1)`` output channels laid
    out as per-octave blocks.
    """
    if m < 0:
        raise ValueError(f"octave count must be >= 0, got {m}")
    x = np.asarray(x)
    parts = [x]
    for k in range(m):
        s = x * (2.0 ** k)
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=-1)


def encoding_dim(d: int, m: int) -> int:
    return d * (2 * m + 1)
