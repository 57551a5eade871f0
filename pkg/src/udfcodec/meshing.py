"""Marching cubes over a reassembled band field, plus the full
mesh -> codec -> mesh reconstruction pipeline.

A UDF is nonnegative, so extracting at theta = 1/N produces a thin double
shell at offset +-theta around the true surface; the shell is kept as-is.
Cells with any corner missing from the band are treated as entirely above
the iso value, which is safe because the band half-width 4/N exceeds theta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import DenseBandField, partition, reassemble
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .mesh import TriangleMesh, denormalize_vertices, normalize_to_unit_cube
from .model import LogVaeParams, decode, encode
from .udf import TAU_VOXELS, voxelize_sparse


class MeshingError(ValueError):
    """Invalid iso configuration."""


@dataclass(frozen=True)
class IsoConfig:
    N: int
    theta: float | None = None  # denormalized iso value; default 1/N

    def __post_init__(self):
        self.iso  # validates the level against the band width

    @property
    def iso(self) -> float:
        theta = 1.0 / self.N if self.theta is None else self.theta
        if not 0.0 < theta < TAU_VOXELS / self.N:
            raise MeshingError(f"theta={theta} must lie inside the band (0, {TAU_VOXELS / self.N})")
        return theta


def marching_cubes(field: DenseBandField, norm_range: tuple[float, float],
                   cfg: IsoConfig) -> TriangleMesh:
    """Standard 256-case extraction at cfg.iso over fully-banded cells.

    Vertices are voxel-center-aligned positions in the [0,1]^3 grid frame,
    welded by exact global edge identity. An empty mesh (no crossings) is a
    valid result, not an error.
    """
    theta = cfg.iso
    if len(field.coords) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    norm_min, norm_max = norm_range
    lo = field.coords.min(axis=0)
    hi = field.coords.max(axis=0)
    dims = hi - lo + 1
    present = np.zeros(dims, dtype=bool)
    u = np.full(dims, np.inf)
    idx = tuple((field.coords - lo).T)
    present[idx] = True
    u[idx] = norm_min + field.values.astype(np.float64) * (norm_max - norm_min)

    if min(dims) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    below = present & (u < theta)  # corners exactly at theta count as above

    def corner_slice(arr, off):
        ox, oy, oz = off
        return arr[ox:arr.shape[0] - 1 + ox, oy:arr.shape[1] - 1 + oy, oz:arr.shape[2] - 1 + oz]

    all_present = np.ones(tuple(d - 1 for d in dims), dtype=bool)
    case = np.zeros(tuple(d - 1 for d in dims), dtype=np.uint8)
    for c, off in enumerate(CORNER_OFFSETS):
        all_present &= corner_slice(present, off)
        case |= corner_slice(below, off).astype(np.uint8) << c
    active = np.argwhere(all_present & (case > 0) & (case < 255))

    vertices: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    weld: dict[tuple[int, int, int, int], int] = {}
    offs = np.asarray(CORNER_OFFSETS, dtype=np.int64)
    inv_n = 1.0 / cfg.N
    for cell in active:
        cu = [u[cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]] for o in offs]
        cidx = int(case[cell[0], cell[1], cell[2]])
        edge_vert: dict[int, int] = {}
        mask = EDGE_TABLE[cidx]
        for e in range(12):
            if not mask & (1 << e):
                continue
            c1, c2 = EDGE_CORNERS[e]
            o1, o2 = offs[c1], offs[c2]
            gmin = cell + np.minimum(o1, o2) + lo
            axis = int(np.argmax(o1 != o2))
            key = (int(gmin[0]), int(gmin[1]), int(gmin[2]), axis)
            vid = weld.get(key)
            if vid is None:
                u1, u2 = cu[c1], cu[c2]
                t = (theta - u1) / (u2 - u1)
                p1 = (cell + o1 + lo + 0.5) * inv_n
                p2 = (cell + o2 + lo + 0.5) * inv_n
                vid = len(vertices)
                vertices.append(p1 + t * (p2 - p1))
                weld[key] = vid
            edge_vert[e] = vid
        tri = TRI_TABLE[cidx]
        for i in range(0, len(tri), 3):
            faces.append((edge_vert[tri[i]], edge_vert[tri[i + 1]], edge_vert[tri[i + 2]]))

    if not vertices:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.asarray(vertices), np.asarray(faces, dtype=np.int64))


def reconstruct(mesh_in: TriangleMesh, params: LogVaeParams, N: int, s: int, alpha: int,
                theta: float | None = None, seed: int = 0,
                deterministic: bool = False) -> TriangleMesh:
    """Full codec round trip back to the input coordinate frame."""
    norm_mesh, scale, offset = normalize_to_unit_cube(mesh_in)
    vol = voxelize_sparse(norm_mesh, N)
    blocks = partition(vol, s, alpha)
    latents = encode(blocks, params, rng_seed=None if deterministic else seed)
    pred = decode(latents, params, N=N, s=s, alpha=alpha, use_mean=deterministic)
    field = reassemble(pred.to_ublockset())
    out = marching_cubes(field, (vol.norm_min, vol.norm_max), IsoConfig(N=N, theta=theta))
    if out.num_vertices == 0:
        return out
    return TriangleMesh(denormalize_vertices(out.vertices, scale, offset), out.triangles)
