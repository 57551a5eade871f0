"""Distance queries, BVH equivalence, and band voxelization.

The point-to-triangle primitive is checked against an independent oracle:
constrained minimization over barycentric coordinates (scipy SLSQP), plus
hand-built cases with closed-form answers. The BVH is then required to be
bitwise identical to the brute-force all-triangles scan.
"""
from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import box_mesh, icosphere, two_triangle_sheet
from udfcodec.mesh import TriangleMesh
from udfcodec.udf import (SparseUdfVolume, UdfError, brute_force_udf, build_bvh,
                          candidate_voxels, load_udfv, point_triangle_distance,
                          query_udf, query_udf_batch, save_udfv, voxel_centers,
                          voxelize_sparse)

RNG = np.random.default_rng(7)


def oracle_point_triangle(p, a, b, c):
    """min ||a + s(b-a) + t(c-a) - p|| over the barycentric simplex."""
    e1, e2 = b - a, c - a

    def f(st):
        q = a + st[0] * e1 + st[1] * e2
        return float(np.dot(q - p, q - p))

    best = np.inf
    for s0, t0 in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1 / 3, 1 / 3),
                   (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]:
        res = minimize(f, [s0, t0], method="SLSQP",
                       bounds=[(0, 1), (0, 1)],
                       constraints=[{"type": "ineq",
                                     "fun": lambda st: 1.0 - st[0] - st[1]}],
                       options={"ftol": 1e-16, "maxiter": 200})
        best = min(best, res.fun)
    return np.sqrt(best)


class TestPointTriangle:
    def test_random_pairs_match_oracle(self):
        for _ in range(60):
            a, b, c, p = RNG.standard_normal((4, 3))
            got = point_triangle_distance(p, a, b, c)
            want = oracle_point_triangle(p, a, b, c)
            assert got == pytest.approx(want, abs=1e-7)

    def test_face_region_closed_form(self):
        a, b, c = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
        assert point_triangle_distance([0.25, 0.25, 0.7], a, b, c) == pytest.approx(0.7)

    def test_vertex_region_closed_form(self):
        a, b, c = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
        p = np.array([-3.0, -4.0, 0.0])
        assert point_triangle_distance(p, a, b, c) == pytest.approx(5.0)

    def test_edge_region_closed_form(self):
        a, b, c = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
        p = np.array([0.5, -2.0, 0.0])
        assert point_triangle_distance(p, a, b, c) == pytest.approx(2.0)

    def test_point_on_surface_is_zero(self):
        a, b, c = RNG.standard_normal((3, 3))
        p = (a + b + c) / 3.0
        assert point_triangle_distance(p, a, b, c) == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_triangle_collapses_to_segment(self):
        a = np.array([0.0, 0.0, 0.0])
        b = np.array([1.0, 0.0, 0.0])
        c = b.copy()  # zero-area
        assert point_triangle_distance([0.5, 1.0, 0.0], a, b, c) == pytest.approx(1.0)
        assert point_triangle_distance([2.0, 0.0, 0.0], a, b, c) == pytest.approx(1.0)

    def test_fully_degenerate_point_triangle(self):
        a = np.array([1.0, 2.0, 3.0])
        assert point_triangle_distance([1.0, 2.0, 7.0], a, a, a) == pytest.approx(4.0)


class TestBvh:
    @pytest.mark.parametrize("mesh_builder", [lambda: icosphere(2), box_mesh,
                                              two_triangle_sheet])
    def test_bitwise_equal_to_brute_force(self, mesh_builder):
        mesh = mesh_builder()
        bvh = build_bvh(mesh)
        pts = RNG.random((500, 3))
        fast = query_udf_batch(bvh, pts)
        slow = brute_force_udf(mesh, pts)
        np.testing.assert_array_equal(fast, slow)

    def test_single_query_matches_batch(self):
        mesh = icosphere(1)
        bvh = build_bvh(mesh)
        pts = RNG.random((50, 3))
        batch = query_udf_batch(bvh, pts)
        singles = np.array([query_udf(bvh, p) for p in pts])
        np.testing.assert_array_equal(batch, singles)

    def test_sphere_distance_is_radial(self):
        mesh = icosphere(3)  # close to the analytic sphere
        bvh = build_bvh(mesh)
        pts = RNG.random((200, 3))
        rad = np.abs(np.linalg.norm(pts - 0.5, axis=1) - 0.5)
        got = query_udf_batch(bvh, pts)
        # facet sagitta of an order-3 icosphere bounds the discrepancy
        np.testing.assert_allclose(got, rad, atol=5e-3)

    def test_triangle_order_independence(self):
        mesh = icosphere(2)
        perm = RNG.permutation(mesh.num_triangles)
        shuffled = TriangleMesh(mesh.vertices, mesh.triangles[perm])
        pts = RNG.random((200, 3))
        np.testing.assert_allclose(query_udf_batch(build_bvh(mesh), pts),
                                   query_udf_batch(build_bvh(shuffled), pts),
                                   rtol=0, atol=0)

    def test_lipschitz_bound(self):
        mesh = box_mesh()
        bvh = build_bvh(mesh)
        p = RNG.random((2000, 3))
        q = np.clip(p + 0.05 * RNG.standard_normal((2000, 3)), 0, 1)
        du = np.abs(query_udf_batch(bvh, p) - query_udf_batch(bvh, q))
        assert np.all(du <= np.linalg.norm(p - q, axis=1) + 1e-9)


class TestVoxelize:
    def test_band_membership_is_strict(self):
        mesh = icosphere(2)
        vol = voxelize_sparse(mesh, 32)
        u = brute_force_udf(mesh, voxel_centers(vol.coords, 32))
        assert np.all(u < vol.tau)

    def test_no_band_voxel_missed(self):
        """Dense check: every voxel with u < tau appears in the sparse set."""
        mesh = two_triangle_sheet()
        N = 32
        grid = np.stack(np.meshgrid(*[np.arange(N)] * 3, indexing="ij"),
                        axis=-1).reshape(-1, 3).astype(np.int32)
        u = brute_force_udf(mesh, voxel_centers(grid, N))
        want = grid[u < 4.0 / N]
        vol = voxelize_sparse(mesh, N)
        want_keys = set(map(tuple, want.tolist()))
        got_keys = set(map(tuple, vol.coords.tolist()))
        assert got_keys == want_keys

    def test_values_are_normalized_distances(self):
        mesh = box_mesh()
        vol = voxelize_sparse(mesh, 32)
        u = brute_force_udf(mesh, voxel_centers(vol.coords, 32))
        np.testing.assert_allclose(vol.values,
                                   (u * 32 / 5.0).astype(np.float32),
                                   rtol=0, atol=1e-7)
        assert np.all(vol.values < 0.8)  # band bound: tau/clip

    def test_coords_sorted_and_unique(self):
        vol = voxelize_sparse(icosphere(2), 32)
        lin = (vol.coords[:, 0].astype(np.int64) * 32 + vol.coords[:, 1]) * 32 \
            + vol.coords[:, 2]
        assert np.all(np.diff(lin) > 0)

    def test_candidate_superset(self):
        mesh = box_mesh()
        vol = voxelize_sparse(mesh, 32)
        cand = set(map(tuple, candidate_voxels(mesh, 32).tolist()))
        assert set(map(tuple, vol.coords.tolist())) <= cand

    @pytest.mark.parametrize("bad_n", [0, 15, 24, 8, 4096, -32])
    def test_resolution_validation(self, bad_n):
        with pytest.raises(UdfError):
            voxelize_sparse(box_mesh(), bad_n)

    def test_deterministic_across_runs(self):
        mesh = icosphere(2)
        a = voxelize_sparse(mesh, 32)
        b = voxelize_sparse(mesh, 32)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.values, b.values)


class TestUdfvFile:
    def test_roundtrip_bitwise(self, tmp_path):
        vol = voxelize_sparse(icosphere(2), 32)
        path = tmp_path / "sphere.udfv"
        save_udfv(vol, path)
        back = load_udfv(path)
        assert back.N == vol.N
        np.testing.assert_array_equal(back.coords, vol.coords)
        np.testing.assert_array_equal(back.values, vol.values)

    def test_repeated_save_identical_bytes(self, tmp_path):
        vol = voxelize_sparse(box_mesh(), 32)
        p1, p2 = tmp_path / "a.udfv", tmp_path / "b.udfv"
        save_udfv(vol, p1)
        save_udfv(vol, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        vol = voxelize_sparse(box_mesh(), 32)
        path = tmp_path / "a.udfv"
        save_udfv(vol, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(UdfError):
            load_udfv(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.udfv"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(UdfError):
            load_udfv(path)
