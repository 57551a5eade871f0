"""Shared geometry fixtures: analytic primitives with known distance fields."""
from __future__ import annotations

import numpy as np
import pytest

from udfcodec.mesh import TriangleMesh


def icosphere(subdivisions: int = 2, radius: float = 0.5,
              center=(0.5, 0.5, 0.5)) -> TriangleMesh:
    """Geodesic sphere from a subdivided icosahedron, vertices on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in edge_mid:
                m = vlist[a] + vlist[b]
                vlist.append(m / np.linalg.norm(m))
                edge_mid[key] = len(vlist) - 1
            return edge_mid[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        tris = np.asarray(new_tris, dtype=np.int64)
    return TriangleMesh(verts * radius + np.asarray(center, dtype=np.float64), tris)


def box_mesh(lo=(0.2, 0.25, 0.3), hi=(0.8, 0.7, 0.65)) -> TriangleMesh:
    """Axis-aligned box, 12 triangles with outward orientation."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
             (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7)]
    tris = []
    for a, b, c, d in quads:
        tris += [[a, b, c], [a, c, d]]
    return TriangleMesh(corners, np.asarray(tris, dtype=np.int64))


def two_triangle_sheet() -> TriangleMesh:
    """Two coplanar triangles forming a tilted quad inside the unit cube."""
    verts = np.array([[0.2, 0.3, 0.40], [0.8, 0.3, 0.45],
                      [0.8, 0.7, 0.60], [0.2, 0.7, 0.55]])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriangleMesh(verts, tris)


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(2)


@pytest.fixture(scope="session")
def fixture_meshes():
    """Three small meshes (all under 500 triangles)."""
    return [icosphere(2), box_mesh(), two_triangle_sheet()]
