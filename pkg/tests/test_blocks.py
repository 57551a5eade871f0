"""Padded block partition and pad-average reassembly.

Oracles: active-block occupancy recomputed by exhaustive iteration, and
reassembly recomputed by a literal scatter-add / count loop over every
voxel of every padded block.
"""
from __future__ import annotations

import numpy as np
import pytest

from conftest import box_mesh, icosphere
from udfcodec.blocks import (BlockError, PAD_DEFAULT, UBlockSet, load_ublk,
                             partition, reassemble, roundtrip_identity, save_ublk)
from udfcodec.udf import SparseUdfVolume, voxelize_sparse

RNG = np.random.default_rng(99)


def random_volume(N=32, n=400, seed=5):
    rng = np.random.default_rng(seed)
    lin = rng.choice(N ** 3, size=n, replace=False)
    lin.sort()
    coords = np.stack([lin // (N * N), (lin // N) % N, lin % N], 1).astype(np.int32)
    values = (rng.random(n) * 0.8).astype(np.float32)
    return SparseUdfVolume(N=N, coords=coords, values=values)


def oracle_reassemble(blocks: UBlockSet):
    """Literal per-voxel scatter-add and count over all padded blocks."""
    N, D, alpha = blocks.N, blocks.D, blocks.alpha
    P = D + 2 * alpha
    sums: dict[tuple, float] = {}
    counts: dict[tuple, int] = {}
    for p, tensor in zip(blocks.coords, blocks.tensors):
        base = p.astype(np.int64) * D - alpha
        for a in range(P):
            for b in range(P):
                for c in range(P):
                    g = (base[0] + a, base[1] + b, base[2] + c)
                    if not all(0 <= gi < N for gi in g):
                        continue
                    sums[g] = sums.get(g, 0.0) + float(tensor[a, b, c])
                    counts[g] = counts.get(g, 0) + 1
    keys = sorted(sums)
    coords = np.array(keys, dtype=np.int32).reshape(-1, 3)
    values = np.array([np.float32(sums[k] / counts[k]) for k in keys],
                      dtype=np.float32)
    cnts = np.array([counts[k] for k in keys], dtype=np.int32)
    return coords, values, cnts


class TestPartition:
    def test_active_blocks_match_exhaustive_occupancy(self):
        vol = random_volume()
        blocks = partition(vol, s=8, alpha=2)
        want = sorted(set(map(tuple, (vol.coords // blocks.D).tolist())))
        got = sorted(map(tuple, blocks.coords.tolist()))
        assert got == want

    def test_core_values_copied_exactly(self):
        vol = random_volume()
        blocks = partition(vol, s=8, alpha=2)
        D, alpha = blocks.D, blocks.alpha
        lookup = {tuple(c): v for c, v in zip(vol.coords.tolist(), vol.values)}
        for p, tensor in zip(blocks.coords.tolist(), blocks.tensors):
            base = np.array(p) * D
            core = tensor[alpha:alpha + D, alpha:alpha + D, alpha:alpha + D]
            for off in np.argwhere(core != PAD_DEFAULT):
                g = tuple((base + off).tolist())
                # non-default entries must be real band voxels
                assert g in lookup and core[tuple(off)] == lookup[g]
            for g, v in lookup.items():
                rel = np.array(g) - base
                if np.all(rel >= 0) and np.all(rel < D):
                    assert core[tuple(rel)] == v

    def test_halo_reads_neighbor_band_voxels(self):
        # two band voxels straddling a block boundary at x = 8
        coords = np.array([[7, 4, 4], [8, 4, 4]], dtype=np.int32)
        values = np.array([0.25, 0.5], dtype=np.float32)
        vol = SparseUdfVolume(N=32, coords=coords, values=values)
        blocks = partition(vol, s=4, alpha=2)  # D = 8
        bidx = {tuple(c): i for i, c in enumerate(blocks.coords.tolist())}
        left = blocks.tensors[bidx[(0, 0, 0)]]
        right = blocks.tensors[bidx[(1, 0, 0)]]
        # halo of the left block covers global x=8, core covers x=7
        assert left[2 + 7, 2 + 4, 2 + 4] == np.float32(0.25)
        assert left[2 + 8, 2 + 4, 2 + 4] == np.float32(0.5)
        assert right[2 - 1, 2 + 4, 2 + 4] == np.float32(0.25)
        assert right[2 + 0, 2 + 4, 2 + 4] == np.float32(0.5)

    def test_out_of_grid_padding_is_default(self):
        coords = np.array([[0, 0, 0]], dtype=np.int32)
        values = np.array([0.1], dtype=np.float32)
        vol = SparseUdfVolume(N=32, coords=coords, values=values)
        blocks = partition(vol, s=8, alpha=2)
        t = blocks.tensors[0]
        assert np.all(t[:2, :, :] == PAD_DEFAULT)
        assert np.all(t[:, :2, :] == PAD_DEFAULT)
        assert np.all(t[:, :, :2] == PAD_DEFAULT)
        assert t[2, 2, 2] == np.float32(0.1)

    def test_invalid_geometry_rejected(self):
        vol = random_volume()
        with pytest.raises(BlockError):
            partition(vol, s=5, alpha=2)  # s must divide N
        with pytest.raises(BlockError):
            partition(vol, s=8, alpha=-1)

    def test_block_coords_sorted(self):
        blocks = partition(random_volume(), s=8, alpha=2)
        n = blocks.N // blocks.D
        lin = (blocks.coords[:, 0].astype(np.int64) * n
               + blocks.coords[:, 1]) * n + blocks.coords[:, 2]
        assert np.all(np.diff(lin) > 0)


class TestReassemble:
    def test_matches_scatter_add_count_oracle(self):
        vol = random_volume(N=32, n=300)
        blocks = partition(vol, s=8, alpha=2)
        field = reassemble(blocks)
        coords, values, counts = oracle_reassemble(blocks)
        np.testing.assert_array_equal(field.coords, coords)
        np.testing.assert_array_equal(field.values, values)
        np.testing.assert_array_equal(field.counts, counts)

    def test_alpha0_roundtrip_bitwise(self):
        vol = voxelize_sparse(icosphere(2), 32)
        field, mismatches = roundtrip_identity(vol, s=8, alpha=0)
        assert mismatches.shape[0] == 0
        band = {tuple(c): v for c, v in zip(field.coords.tolist(), field.values)}
        for c, v in zip(vol.coords.tolist(), vol.values):
            assert band[tuple(c)] == v

    def test_alpha2_roundtrip_recovers_band(self):
        vol = voxelize_sparse(box_mesh(), 32)
        field, mismatches = roundtrip_identity(vol, s=8, alpha=2)
        assert mismatches.shape[0] == 0

    def test_overlap_average_of_disagreeing_blocks(self):
        # two adjacent active blocks whose halos disagree about one voxel
        blocks = UBlockSet(
            N=32, s=4, alpha=2,  # D = 8, padded side 12
            coords=np.array([[0, 0, 0], [1, 0, 0]], dtype=np.int32),
            tensors=np.full((2, 12, 12, 12), PAD_DEFAULT, dtype=np.float32))
        t = blocks.tensors
        t[0][2 + 7, 2 + 4, 2 + 4] = 0.2   # block 0 core voxel (7,4,4)
        t[1][2 - 1, 2 + 4, 2 + 4] = 0.6   # block 1 halo view of the same voxel
        field = reassemble(blocks)
        idx = np.flatnonzero((field.coords == [7, 4, 4]).all(axis=1))[0]
        assert field.counts[idx] == 2
        expected = np.float32((np.float64(np.float32(0.2))
                               + np.float64(np.float32(0.6))) / 2.0)
        assert field.values[idx] == expected

    def test_block_order_invariance(self):
        vol = random_volume(N=32, n=500, seed=11)
        blocks = partition(vol, s=8, alpha=2)
        perm = RNG.permutation(blocks.L)
        shuffled = UBlockSet(N=blocks.N, s=blocks.s, alpha=blocks.alpha,
                             coords=blocks.coords[perm],
                             tensors=blocks.tensors[perm])
        a, b = reassemble(blocks), reassemble(shuffled)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.values, b.values)


class TestUblkFile:
    def test_roundtrip_bitwise(self, tmp_path):
        blocks = partition(random_volume(), s=8, alpha=2)
        path = tmp_path / "b.ublk"
        save_ublk(blocks, path)
        back = load_ublk(path)
        assert (back.N, back.s, back.alpha) == (blocks.N, blocks.s, blocks.alpha)
        np.testing.assert_array_equal(back.coords, blocks.coords)
        np.testing.assert_array_equal(back.tensors, blocks.tensors)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ublk"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(BlockError):
            load_ublk(path)
