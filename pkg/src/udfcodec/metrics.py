"""Reconstruction metrics: area-weighted surface sampling, symmetric
Chamfer distance, and F-score at a distance threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh


class MetricsError(ValueError):
    """Degenerate inputs (empty meshes, zero area)."""


@dataclass(frozen=True)
class PointSample:
    points: np.ndarray      # (K, 3)
    source: str
    seed: int

    @property
    def count(self) -> int:
        return len(self.points)


def sample_points(mesh: TriangleMesh, K: int, seed: int, source: str = "") -> PointSample:
    """K points drawn area-proportionally across triangles with uniform
    barycentric coordinates; deterministic per seed."""
    if mesh.num_triangles == 0:
        raise MetricsError("cannot sample an empty mesh")
    a, b, c = mesh.triangle_corners()
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise MetricsError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=K, p=areas / total)
    r1 = rng.random(K)
    r2 = rng.random(K)
    flip = r1 + r2 > 1.0  # fold into the barycentric simplex
    r1 = np.where(flip, 1.0 - r1, r1)
    r2 = np.where(flip, 1.0 - r2, r2)
    pts = a[tri] + r1[:, None] * (b[tri] - a[tri]) + r2[:, None] * (c[tri] - a[tri])
    return PointSample(points=pts, source=source, seed=seed)


def _nn_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of a, distance to its nearest neighbor in b (exact)."""
    return cKDTree(b).query(a, k=1)[0]


def chamfer(A: PointSample, B: PointSample) -> float:
    """(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2, unsquared Euclidean."""
    if A.count == 0 or B.count == 0:
        raise MetricsError("chamfer needs non-empty samples")
    return 0.5 * (float(_nn_dists(A.points, B.points).mean())
                  + float(_nn_dists(B.points, A.points).mean()))


def fscore(A: PointSample, B: PointSample, t: float) -> float:
    """F-score in [0, 100] at distance threshold t."""
    if t <= 0:
        raise MetricsError("threshold must be positive")
    precision = float((_nn_dists(A.points, B.points) <= t).mean())
    recall = float((_nn_dists(B.points, A.points) <= t).mean())
    if precision + recall == 0.0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)
