"""Farthest point sampling over mesh vertices."""

import numpy as np


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns indices into ``points``.

    Deterministic given ``start``: each new sample maximizes the minimum
    Euclidean distance to the already-selected set (ties broken by lowest
    index via argmax).
    """
    pts = np.asarray(points, dtype=np.float64)
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    if n > len(pts):
        raise ValueError(f"cannot sample {n} points from {len(pts)}")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    for k in range(1, n):
        idx = int(np.argmax(min_d2))
        chosen[k] = idx
        d2 = ((pts - pts[idx]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen
