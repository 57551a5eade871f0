"""Padded block partitioning of a sparse UDF band and pad-average reassembly.

A volume at resolution N^3 is cut into s^3 cores of side D = N/s; only
cores containing at least one band voxel become blocks. Each block tensor
covers its core plus `alpha` voxels of padding per side, with voxels
outside the band (or the grid) filled with the normalized clip value 1.0.
Reassembly scatters every block tensor back and averages overlaps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .udf import SparseUdfVolume

UBLK_MAGIC = b"UBLK"
UBLK_VERSION = 1

# Normalized image of the 5/N clip distance under the fixed [0, 5/N] mapping.
PAD_DEFAULT = np.float32(1.0)


class BlockError(ValueError):
    """Invalid partition parameters or malformed UBLK file."""


@dataclass(frozen=True)
class UBlockSet:
    """Active padded subvolumes of a band volume.

    coords are block coordinates in [0,s)^3, lexicographically sorted and
    unique; tensors has shape (L, P, P, P) with P = D + 2*alpha, float32,
    indexed [x, y, z] so z varies fastest in memory.
    """

    N: int
    s: int
    alpha: int
    coords: np.ndarray
    tensors: np.ndarray

    @property
    def D(self) -> int:
        return self.N // self.s

    @property
    def padded_side(self) -> int:
        return self.D + 2 * self.alpha

    @property
    def L(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class DenseBandField:
    """Reassembled band: per-voxel averaged value and contribution count."""

    N: int
    coords: np.ndarray   # (M, 3) int32 sorted lexicographically
    values: np.ndarray   # (M,) float32
    counts: np.ndarray   # (M,) int32, >= 1


def _linear(coords: np.ndarray, N: int) -> np.ndarray:
    c = coords.astype(np.int64)
    return (c[:, 0] * N + c[:, 1]) * N + c[:, 2]


def _unlinear(lin: np.ndarray, N: int) -> np.ndarray:
    out = np.empty((len(lin), 3), dtype=np.int32)
    out[:, 2] = lin % N
    out[:, 1] = (lin // N) % N
    out[:, 0] = lin // (N * N)
    return out


def partition(vol: SparseUdfVolume, s: int, alpha: int) -> UBlockSet:
    """Cut the band into active padded blocks (core side D = N/s)."""
    if s < 1 or vol.N % s != 0:
        raise BlockError(f"partition factor {s} does not divide N={vol.N}")
    if alpha < 0:
        raise BlockError("padding must be nonnegative")
    D = vol.N // s
    P = D + 2 * alpha
    if P < 1:
        raise BlockError("padded block side must be >= 1")

    block_of_voxel = vol.coords // D
    block_lin = _linear(block_of_voxel, s)
    active = np.unique(block_lin)
    coords = _unlinear(active, s)

    vol_lin = _linear(vol.coords, vol.N)  # sorted by construction
    tensors = np.full((len(active), P, P, P), PAD_DEFAULT, dtype=np.float32)

    # padded window template, relative to D*p - alpha
    rng = np.arange(P)
    gx, gy, gz = np.meshgrid(rng, rng, rng, indexing="ij")
    template = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1).astype(np.int64)

    for i, p in enumerate(coords):
        origin = p.astype(np.int64) * D - alpha
        g = template + origin
        in_grid = ((g >= 0) & (g < vol.N)).all(axis=1)
        keys = _linear(g[in_grid], vol.N)
        pos = np.searchsorted(vol_lin, keys)
        pos = np.minimum(pos, len(vol_lin) - 1)
        hit = vol_lin[pos] == keys
        flat = tensors[i].reshape(-1)
        target = np.flatnonzero(in_grid)[hit]
        flat[target] = vol.values[pos[hit]]
    return UBlockSet(N=vol.N, s=s, alpha=alpha, coords=coords, tensors=tensors)


def reassemble(blocks: UBlockSet) -> DenseBandField:
    """Scatter padded blocks back to the N^3 grid, averaging overlaps.

    Accumulation is in float64 with a fixed (key, block-order) reduction
    order, so the result is independent of parallelism and block shuffles.
    """
    N, D, alpha, P = blocks.N, blocks.D, blocks.alpha, blocks.padded_side
    rng = np.arange(P)
    gx, gy, gz = np.meshgrid(rng, rng, rng, indexing="ij")
    template = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1).astype(np.int64)

    all_keys = []
    all_vals = []
    for i, p in enumerate(blocks.coords):
        origin = p.astype(np.int64) * D - alpha
        g = template + origin
        in_grid = ((g >= 0) & (g < N)).all(axis=1)
        all_keys.append(_linear(g[in_grid], N))
        all_vals.append(blocks.tensors[i].reshape(-1)[in_grid].astype(np.float64))
    if not all_keys:
        return DenseBandField(N=N, coords=np.empty((0, 3), np.int32),
                              values=np.empty(0, np.float32), counts=np.empty(0, np.int32))
    keys = np.concatenate(all_keys)
    vals = np.concatenate(all_vals)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    vals = vals[order]
    uniq, first = np.unique(keys, return_index=True)
    sums = np.add.reduceat(vals, first)
    counts = np.diff(np.append(first, len(keys)))
    values = (sums / counts).astype(np.float32)
    return DenseBandField(N=N, coords=_unlinear(uniq, N),
                          values=values, counts=counts.astype(np.int32))


def roundtrip_identity(vol: SparseUdfVolume, s: int, alpha: int) -> tuple[DenseBandField, np.ndarray]:
    """Partition + reassemble with no model in between.

    Returns the reassembled field and the coordinates of band voxels whose
    value changed (possible only where a default-filled pad of an active
    neighbor leaks into the average).
    """
    field = reassemble(partition(vol, s, alpha))
    field_lin = _linear(field.coords, vol.N)
    vol_lin = _linear(vol.coords, vol.N)
    pos = np.searchsorted(field_lin, vol_lin)
    if len(field_lin) == 0 or np.any(pos >= len(field_lin)) or np.any(field_lin[pos] != vol_lin):
        raise BlockError("reassembled field does not cover the band")
    mismatch = field.values[pos] != vol.values
    return field, vol.coords[mismatch]


def save_ublk(blocks: UBlockSet, path) -> None:
    header = UBLK_MAGIC + struct.pack("<IIIIQ", UBLK_VERSION, blocks.N, blocks.s,
                                      blocks.alpha, blocks.L)
    parts = [header]
    for i in range(blocks.L):
        parts.append(struct.pack("<III", *(int(v) for v in blocks.coords[i])))
        parts.append(np.ascontiguousarray(blocks.tensors[i], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_ublk(path) -> UBlockSet:
    data = Path(path).read_bytes()
    if data[:4] != UBLK_MAGIC:
        raise BlockError(f"{path}: not a UBLK file")
    version, N, s, alpha, L = struct.unpack_from("<IIIIQ", data, 4)
    if version != UBLK_VERSION:
        raise BlockError(f"{path}: unsupported UBLK version {version}")
    if s < 1 or N % s != 0:
        raise BlockError(f"{path}: invalid header (N={N}, s={s})")
    P = N // s + 2 * alpha
    off = 4 + struct.calcsize("<IIIIQ")
    coords = np.empty((L, 3), dtype=np.int32)
    tensors = np.empty((L, P, P, P), dtype=np.float32)
    block_bytes = 12 + 4 * P ** 3
    if len(data) != off + L * block_bytes:
        raise BlockError(f"{path}: truncated UBLK payload")
    for i in range(L):
        coords[i] = struct.unpack_from("<III", data, off)
        tensors[i] = np.frombuffer(data, dtype="<f4", count=P ** 3,
                                   offset=off + 12).reshape(P, P, P)
        off += block_bytes
    return UBlockSet(N=N, s=s, alpha=alpha, coords=coords, tensors=tensors)
