"""Triangle mesh container plus OBJ load/save and unit-cube normalization.

The interchange format is a deliberately small OBJ subset: `v` lines,
`f` lines (triangles; larger polygons are fan-triangulated) and `#`
comments. Everything else is rejected so that files written by this
package are the only thing it promises to read back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Longest bounding-box side maps to this length inside [0,1]^3; the 2%
# margin per side keeps the near-surface band of width 4/N inside the grid.
UNIT_CUBE_MARGIN = 0.96


class MeshError(ValueError):
    """Invalid mesh data or malformed mesh file."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup: float64 vertices (V,3), int64 triangles (T,3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V,3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (T,3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise MeshError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshError("triangle with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-triangle corner positions, each (T,3)."""
        return (self.vertices[self.triangles[:, 0]],
                self.vertices[self.triangles[:, 1]],
                self.vertices[self.triangles[:, 2]])

    def degenerate_triangle_count(self) -> int:
        """Triangles with (numerically) zero area. Kept, but callers may warn."""
        if not self.num_triangles:
            return 0
        a, b, c = self.triangle_corners()
        n = np.cross(b - a, c - a)
        area2 = np.linalg.norm(n, axis=1)
        return int(np.count_nonzero(area2 <= 1e-30))


def load_mesh(path) -> tuple[TriangleMesh, int]:
    """Parse an OBJ file; returns (mesh, degenerate_triangle_count).

    Raises MeshError with the offending line number for malformed input.
    """
    path = Path(path)
    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []
    try:
        text = path.read_text()
    except OSError as e:
        raise MeshError(f"cannot read {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) != 4:
                raise MeshError(f"{path}:{lineno}: `v` needs 3 coordinates")
            try:
                vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as e:
                raise MeshError(f"{path}:{lineno}: bad coordinate: {e}") from e
        elif tag == "f":
            if len(parts) < 4:
                raise MeshError(f"{path}:{lineno}: `f` needs >=3 indices")
            idx = []
            for tok in parts[1:]:
                tok = tok.split("/", 1)[0]  # tolerate v/vt/vn references
                try:
                    i = int(tok)
                except ValueError as e:
                    raise MeshError(f"{path}:{lineno}: bad index {tok!r}") from e
                if i == 0:
                    raise MeshError(f"{path}:{lineno}: OBJ indices are 1-based")
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            for i in idx:
                if i < 0 or i >= len(vertices):
                    raise MeshError(f"{path}:{lineno}: vertex index {i + 1} out of range")
            for k in range(1, len(idx) - 1):  # fan triangulation
                tri = (idx[0], idx[k], idx[k + 1])
                if len(set(tri)) != 3:
                    raise MeshError(f"{path}:{lineno}: face repeats a vertex")
                triangles.append(tri)
        else:
            raise MeshError(f"{path}:{lineno}: unsupported OBJ element {tag!r}")
    mesh = TriangleMesh(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
    )
    return mesh, mesh.degenerate_triangle_count()


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write the OBJ subset deterministically (LF endings, 9 significant digits)."""
    if mesh.num_vertices == 0:
        raise MeshError("refusing to save a mesh with no vertices")
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for a, b, c in mesh.triangles:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    data = "\n".join(lines) + "\n"
    try:
        Path(path).write_text(data, newline="\n")
    except OSError as e:
        raise MeshError(f"cannot write {path}: {e}") from e


def normalize_to_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, float, np.ndarray]:
    """Rescale so the longest bbox side spans UNIT_CUBE_MARGIN, centered at 0.5.

    Returns (mesh, scale, offset) with original = normalized/scale - offset.
    """
    if mesh.num_vertices == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0.0:
        raise MeshError("bounding box has zero extent")
    scale = UNIT_CUBE_MARGIN / longest
    center = (lo + hi) / 2.0
    out = (mesh.vertices - center) * scale + 0.5
    offset = 0.5 / scale - center
    return TriangleMesh(out, mesh.triangles), scale, offset


def denormalize_vertices(vertices: np.ndarray, scale: float, offset: np.ndarray) -> np.ndarray:
    """Inverse of normalize_to_unit_cube on raw vertex arrays."""
    return np.asarray(vertices, dtype=np.float64) / scale - offset
