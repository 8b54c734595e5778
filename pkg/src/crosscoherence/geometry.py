"""Point-cloud kernels: normalization, farthest point sampling, ball query
and chamfer distance.

Everything here is deterministic numpy. The differentiable chamfer used by
the autoencoder lives in :mod:`crosscoherence.encoders.autoencoder`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MIN_ENCODER_POINTS = 16


class GeometryError(ValueError):
    """Raised on invalid point-cloud input."""


@dataclass
class ColoredPointCloud:
    """N points with xyz coordinates and RGB colors in [0, 1].

    ``shape_id`` is optional bookkeeping so scorers that read dataset
    metadata (e.g. the attribute oracle) can identify the cloud.
    """

    points: np.ndarray
    colors: np.ndarray
    shape_id: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        validate_cloud(self)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def permuted(self, perm: np.ndarray) -> "ColoredPointCloud":
        return ColoredPointCloud(self.points[perm], self.colors[perm], self.shape_id)


def validate_cloud(cloud: ColoredPointCloud, min_points: int = 1) -> None:
    p, c = cloud.points, cloud.colors
    if p.ndim != 2 or p.shape[1] != 3:
        raise GeometryError(f"points must be N x 3, got {p.shape}")
    if c.shape != p.shape:
        raise GeometryError(f"colors shape {c.shape} does not match points {p.shape}")
    if p.shape[0] < min_points:
        raise GeometryError(f"cloud has {p.shape[0]} points, need at least {min_points}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(c))):
        raise GeometryError("cloud contains non-finite values")
    if c.size and (c.min() < 0.0 or c.max() > 1.0):
        raise GeometryError("colors must lie in [0, 1]")


def normalize_cloud(cloud: ColoredPointCloud, eps: float = 1e-12) -> ColoredPointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A degenerate cloud (all points identical) is only centered; its scale
    factor is clamped to 1.
    """
    validate_cloud(cloud)
    centered = cloud.points - cloud.points.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale < eps:
        scale = 1.0
    return ColoredPointCloud(centered / scale, cloud.colors.copy(), cloud.shape_id)


def canonical_order(points: np.ndarray, colors: Optional[np.ndarray] = None) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z[, r, g, b]).

    Used by the encoder so that index-ordered grouping does not depend on
    the order points arrive in.
    """
    keys = [points[:, 2], points[:, 1], points[:, 0]]
    if colors is not None:
        keys = [colors[:, 2], colors[:, 1], colors[:, 0]] + keys
    return np.lexsort(keys)


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min selection of ``m`` indices.

    The start point is the one farthest from the centroid; every tie
    (including the start) goes to the lowest index.

    Args:
        points: (N, 3) coordinates, or a ColoredPointCloud.
        m: number of indices to select, 1 <= m <= N.

    Returns:
        int64 array of ``m`` distinct indices in selection order.
    """
    if isinstance(points, ColoredPointCloud):
        points = points.points
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"cannot sample {m} points from {n}")
    centroid = points.mean(axis=0)
    # np.argmax returns the first maximal index, which is the tie rule
    start = int(np.argmax(((points - centroid) ** 2).sum(axis=1)))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = ((points - points[start]) ** 2).sum(axis=1)
    min_d2[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[selected[: i + 1]] = -1.0
    return selected


def ball_query(points: np.ndarray, centers, radius: float, k: int) -> np.ndarray:
    """Group up to ``k`` neighbors within ``radius`` of each center.

    Neighbors are taken in point-index order. Short groups are padded by
    repeating their first index; a center with no neighbor in range (only
    possible when the center is not itself a point) gets ``k`` copies of its
    own index.

    Args:
        points: (N, 3) coordinates.
        centers: indices into ``points``.
        radius: inclusive search radius, > 0.
        k: group size, >= 1.

    Returns:
        (len(centers), k) int64 index matrix.
    """
    if isinstance(points, ColoredPointCloud):
        points = points.points
    if radius <= 0:
        raise GeometryError("radius must be positive")
    if k < 1:
        raise GeometryError("k must be >= 1")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if centers.size == 0:
        return np.empty((0, k), dtype=np.int64)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    d2 = ((points[centers][:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    inside = d2 <= radius * radius
    # out-of-range entries get sentinel n so sorting pushes them to the end
    cand = np.where(inside, np.arange(n)[None, :], n)
    cand.sort(axis=1)
    groups = cand[:, :k] if n >= k else np.pad(cand, ((0, 0), (0, k - n)), constant_values=n)
    first = groups[:, :1]
    first = np.where(first == n, centers[:, None], first)
    return np.where(groups == n, first, groups).astype(np.int64)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance with squared Euclidean distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise GeometryError("chamfer distance needs two non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
