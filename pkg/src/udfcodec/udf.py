"""Unsigned distance field evaluation and sparse near-surface voxelization.

Distances are exact (closest point on the closed triangle) and the BVH
query is guaranteed to return the same floating-point value as a brute
force minimum over all triangles: both paths share one per-triangle
distance routine, and a float min is order-independent.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh

UDFV_MAGIC = b"UDFV"
UDFV_VERSION = 1

# Band and clip thresholds as multiples of the voxel size 1/N.
TAU_VOXELS = 4.0
CLIP_VOXELS = 5.0


class UdfError(ValueError):
    """Invalid voxelization parameters or malformed UDFV file."""


def _dot(u, v):
    return (u * v).sum(axis=-1)


def _segment_sqdist(p, a, b):
    """Squared distance from points p to segments [a,b]; degenerate segments ok."""
    ab = b - a
    ap = p - a
    denom = _dot(ab, ab)
    t = np.where(denom > 0.0, _dot(ap, ab) / np.where(denom > 0.0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = ap - t[..., None] * ab
    return _dot(d, d)


def points_triangles_sqdist(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared point-triangle distances with numpy broadcasting over p and (a,b,c).

    Closest point is either on an edge (covered by the three segment
    distances) or the interior plane projection; the latter only applies
    for non-degenerate triangles, so degenerate ones fall back to edges.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    sq = _segment_sqdist(p, a, b)
    sq = np.minimum(sq, _segment_sqdist(p, b, c))
    sq = np.minimum(sq, _segment_sqdist(p, c, a))

    ab = b - a
    ac = c - a
    ap = p - a
    n = np.cross(ab, ac)
    nn = _dot(n, n)
    d00 = _dot(ab, ab)
    d01 = _dot(ab, ac)
    d11 = _dot(ac, ac)
    d20 = _dot(ap, ab)
    d21 = _dot(ap, ac)
    denom = np.where(nn > 0.0, d00 * d11 - d01 * d01, 1.0)
    denom = np.where(denom > 0.0, denom, 1.0)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    inside = (nn > 0.0) & (v >= 0.0) & (w >= 0.0) & (v + w <= 1.0)
    plane_sq = _dot(ap, n) ** 2 / np.where(nn > 0.0, nn, 1.0)
    return np.where(inside, np.minimum(sq, plane_sq), sq)


def point_triangle_distance(p, a, b, c) -> float:
    """Euclidean distance from a single point to a closed triangle."""
    return float(np.sqrt(points_triangles_sqdist(np.asarray(p, float), a, b, c)))


@dataclass(frozen=True)
class TriangleBvh:
    """Binary AABB tree over triangles (median split on centroids).

    Leaves reference contiguous runs of `order`, a permutation of triangle
    indices; inner nodes have count == 0.
    """

    box_lo: np.ndarray   # (nodes, 3)
    box_hi: np.ndarray   # (nodes, 3)
    left: np.ndarray     # (nodes,) child index or -1
    right: np.ndarray
    start: np.ndarray    # leaf run start into `order`
    count: np.ndarray    # leaf run length; 0 for inner nodes
    order: np.ndarray    # permutation of triangle indices
    tri_a: np.ndarray    # triangle corners in `order`, each (T, 3)
    tri_b: np.ndarray
    tri_c: np.ndarray


def build_bvh(mesh: TriangleMesh, leaf_size: int = 8) -> TriangleBvh:
    if mesh.num_triangles == 0:
        raise UdfError("cannot build a BVH over an empty mesh")
    a, b, c = mesh.triangle_corners()
    tri_lo = np.minimum(np.minimum(a, b), c)
    tri_hi = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0

    box_lo, box_hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(mesh.num_triangles)
    segments = [(0, mesh.num_triangles)]  # work stack of (lo, hi) runs paired with node ids

    def new_node(lo_run, hi_run):
        idx = order[lo_run:hi_run]
        box_lo.append(tri_lo[idx].min(axis=0))
        box_hi.append(tri_hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo_run)
        count.append(0)
        return len(box_lo) - 1

    root = new_node(0, mesh.num_triangles)
    stack = [(root, 0, mesh.num_triangles)]
    while stack:
        node, lo_run, hi_run = stack.pop()
        n = hi_run - lo_run
        if n <= leaf_size:
            count[node] = n
            continue
        idx = order[lo_run:hi_run]
        cen = centroids[idx]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        mid = n // 2
        # stable argsort keeps splits deterministic under centroid ties
        perm = np.argsort(cen[:, axis], kind="stable")
        order[lo_run:hi_run] = idx[perm]
        lnode = new_node(lo_run, lo_run + mid)
        rnode = new_node(lo_run + mid, hi_run)
        left[node] = lnode
        right[node] = rnode
        stack.append((lnode, lo_run, lo_run + mid))
        stack.append((rnode, lo_run + mid, hi_run))

    return TriangleBvh(
        box_lo=np.asarray(box_lo), box_hi=np.asarray(box_hi),
        left=np.asarray(left), right=np.asarray(right),
        start=np.asarray(start), count=np.asarray(count),
        order=order,
        tri_a=a[order], tri_b=b[order], tri_c=c[order],
    )


def _box_sqdist(p, lo, hi):
    d = np.maximum(np.maximum(lo - p, 0.0), p - hi)
    return (d * d).sum(axis=-1)


def query_udf(bvh: TriangleBvh, p) -> float:
    """Unsigned distance from p to the mesh (best-first BVH traversal)."""
    p = np.asarray(p, dtype=np.float64)
    best = np.inf
    heap = [(float(_box_sqdist(p, bvh.box_lo[0], bvh.box_hi[0])), 0)]
    while heap:
        lb, node = heapq.heappop(heap)
        if lb > best:
            continue
        cnt = bvh.count[node]
        if cnt > 0:
            s = bvh.start[node]
            sq = points_triangles_sqdist(p, bvh.tri_a[s:s + cnt], bvh.tri_b[s:s + cnt], bvh.tri_c[s:s + cnt])
            best = min(best, float(sq.min()))
        else:
            for child in (bvh.left[node], bvh.right[node]):
                clb = float(_box_sqdist(p, bvh.box_lo[child], bvh.box_hi[child]))
                if clb <= best:
                    heapq.heappush(heap, (clb, child))
    return float(np.sqrt(best))


def query_udf_batch(bvh: TriangleBvh, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Vectorized UDF for many points; identical values to query_udf per point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points), dtype=np.float64)
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = _query_chunk(bvh, points[s:s + chunk])
    return out


def _query_chunk(bvh: TriangleBvh, pts: np.ndarray) -> np.ndarray:
    best = np.full(len(pts), np.inf)
    stack = [0]
    while stack:
        node = stack.pop()
        lb = _box_sqdist(pts, bvh.box_lo[node], bvh.box_hi[node])
        live = lb <= best
        if not live.any():
            continue
        cnt = bvh.count[node]
        if cnt > 0:
            s = bvh.start[node]
            sub = np.flatnonzero(live)
            sq = points_triangles_sqdist(
                pts[sub, None, :],
                bvh.tri_a[None, s:s + cnt], bvh.tri_b[None, s:s + cnt], bvh.tri_c[None, s:s + cnt])
            np.minimum.at(best, sub, sq.min(axis=1))
        else:
            stack.append(bvh.right[node])
            stack.append(bvh.left[node])
    return np.sqrt(best)


def brute_force_udf(mesh: TriangleMesh, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Reference UDF: explicit min over all triangles."""
    a, b, c = mesh.triangle_corners()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points), dtype=np.float64)
    for s in range(0, len(points), chunk):
        sq = points_triangles_sqdist(points[s:s + chunk, None, :], a[None], b[None], c[None])
        out[s:s + chunk] = np.sqrt(sq.min(axis=1))
    return out


@dataclass(frozen=True)
class SparseUdfVolume:
    """Near-surface band of a normalized UDF at resolution N^3.

    coords are sorted lexicographically; values are normalized to [0,1]
    by the fixed mapping [0, clip] -> [0, 1], so the out-of-band clip
    value 5/N maps exactly to 1.0.
    """

    N: int
    coords: np.ndarray   # (M, 3) int32, lexicographically sorted, unique
    values: np.ndarray   # (M,) float32 in [0, 1]

    @property
    def tau(self) -> float:
        return TAU_VOXELS / self.N

    @property
    def clip(self) -> float:
        return CLIP_VOXELS / self.N

    @property
    def norm_min(self) -> float:
        return 0.0

    @property
    def norm_max(self) -> float:
        return self.clip

    def __len__(self) -> int:
        return len(self.values)


def denormalize(v, vol: SparseUdfVolume):
    """Map normalized band values back to raw unsigned distances."""
    return vol.norm_min + np.asarray(v, dtype=np.float64) * (vol.norm_max - vol.norm_min)


def normalize(u, vol: SparseUdfVolume):
    """Map raw distances into the volume's normalized [0,1] range."""
    return (np.asarray(u, dtype=np.float64) - vol.norm_min) / (vol.norm_max - vol.norm_min)


def voxel_centers(coords: np.ndarray, N: int) -> np.ndarray:
    """Sample positions of voxels: cell centers (i+0.5)/N."""
    return (np.asarray(coords, dtype=np.float64) + 0.5) / N


def _validate_resolution(N: int) -> None:
    if not (16 <= N <= 2048) or (N & (N - 1)) != 0:
        raise UdfError(f"resolution must be a power of two in [16, 2048], got {N}")


def candidate_voxels(mesh: TriangleMesh, N: int) -> np.ndarray:
    """Conservative candidate voxel set: triangle bboxes dilated by tau
    plus half a voxel diagonal, so no voxel with u < tau can be missed."""
    a, b, c = mesh.triangle_corners()
    dilation = TAU_VOXELS / N + np.sqrt(3.0) / (2.0 * N)
    lo = np.minimum(np.minimum(a, b), c) - dilation
    hi = np.maximum(np.maximum(a, b), c) + dilation
    # voxel i covers centers (i+0.5)/N; candidate if center in [lo, hi]
    ilo = np.clip(np.ceil(lo * N - 0.5).astype(np.int64), 0, N - 1)
    ihi = np.clip(np.floor(hi * N - 0.5).astype(np.int64), 0, N - 1)
    keys: list[np.ndarray] = []
    for t in range(len(ilo)):
        xs = np.arange(ilo[t, 0], ihi[t, 0] + 1)
        ys = np.arange(ilo[t, 1], ihi[t, 1] + 1)
        zs = np.arange(ilo[t, 2], ihi[t, 2] + 1)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        keys.append((gx * N + gy).ravel() * N + gz.ravel())
    lin = np.unique(np.concatenate(keys)) if keys else np.empty(0, dtype=np.int64)
    coords = np.empty((len(lin), 3), dtype=np.int64)
    coords[:, 2] = lin % N
    coords[:, 1] = (lin // N) % N
    coords[:, 0] = lin // (N * N)
    return coords


def voxelize_sparse(mesh: TriangleMesh, N: int, bvh: TriangleBvh | None = None) -> SparseUdfVolume:
    """Sparse near-surface UDF band: voxels with u < 4/N, normalized to [0,1].

    Candidates come from dilated triangle bboxes and are verified by exact
    BVH queries, so the result set equals a dense brute-force scan.
    """
    _validate_resolution(N)
    if mesh.num_triangles == 0:
        raise UdfError("cannot voxelize a mesh with no triangles")
    if bvh is None:
        bvh = build_bvh(mesh)
    coords = candidate_voxels(mesh, N)
    if len(coords) == 0:
        raise UdfError("mesh lies outside the [0,1]^3 grid (empty band)")
    u = query_udf_batch(bvh, voxel_centers(coords, N))
    keep = u < TAU_VOXELS / N
    coords = coords[keep]
    if len(coords) == 0:
        raise UdfError("no voxels within the near-surface band")
    values = (u[keep] * (N / CLIP_VOXELS)).astype(np.float32)
    # candidate generation already yields lexicographic order, but do not
    # rely on it: sort by linear key for a stable contract
    lin = (coords[:, 0] * N + coords[:, 1]) * N + coords[:, 2]
    perm = np.argsort(lin, kind="stable")
    return SparseUdfVolume(N=N, coords=coords[perm].astype(np.int32), values=values[perm])


def save_udfv(vol: SparseUdfVolume, path) -> None:
    rec = np.empty(len(vol), dtype=np.dtype([("i", "<u4"), ("j", "<u4"), ("k", "<u4"), ("v", "<f4")]))
    rec["i"], rec["j"], rec["k"] = vol.coords[:, 0], vol.coords[:, 1], vol.coords[:, 2]
    rec["v"] = vol.values
    header = UDFV_MAGIC + struct.pack("<IIQdd", UDFV_VERSION, vol.N, len(vol), vol.norm_min, vol.norm_max)
    Path(path).write_bytes(header + rec.tobytes())


def load_udfv(path) -> SparseUdfVolume:
    data = Path(path).read_bytes()
    header_size = 4 + struct.calcsize("<IIQdd")
    if len(data) < header_size:
        raise UdfError(f"{path}: truncated UDFV header")
    if data[:4] != UDFV_MAGIC:
        raise UdfError(f"{path}: not a UDFV file")
    version, N, cnt, norm_min, norm_max = struct.unpack_from("<IIQdd", data, 4)
    if len(data) < header_size + cnt * 16:
        raise UdfError(f"{path}: truncated UDFV payload ({len(data)} bytes, "
                       f"{cnt} records expected)")
    if version != UDFV_VERSION:
        raise UdfError(f"{path}: unsupported UDFV version {version}")
    _validate_resolution(N)
    rec = np.frombuffer(data, dtype=np.dtype([("i", "<u4"), ("j", "<u4"), ("k", "<u4"), ("v", "<f4")]),
                        count=cnt, offset=4 + struct.calcsize("<IIQdd"))
    expected = (0.0, CLIP_VOXELS / N)
    if (norm_min, norm_max) != expected:
        raise UdfError(f"{path}: normalization metadata {norm_min, norm_max} != {expected}")
    coords = np.stack([rec["i"], rec["j"], rec["k"]], axis=1).astype(np.int32)
    return SparseUdfVolume(N=N, coords=coords, values=rec["v"].astype(np.float32))
