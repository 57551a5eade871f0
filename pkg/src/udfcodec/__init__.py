"""udfcodec: sparse-voxel unsigned-distance-field geometry codec.

Pipeline: triangle mesh -> sparse near-surface UDF band -> padded blocks
-> block VAE (local 3D convolutions + shifted-window attention across
blocks) -> pad-average reassembly -> marching cubes -> triangle mesh.
"""

from .blocks import DenseBandField, UBlockSet, partition, reassemble, roundtrip_identity
from .mesh import TriangleMesh, load_mesh, normalize_to_unit_cube, save_mesh
from .meshing import IsoConfig, marching_cubes, reconstruct
from .metrics import PointSample, chamfer, fscore, sample_points
from .model import (LogVaeParams, SparseLatentSet, decode, encode, init_params,
                    kl_loss, positional_encoding, reparameterize, total_loss,
                    window_groups)
from .trainer import TrainConfig, train, train_step
from .udf import (SparseUdfVolume, TriangleBvh, build_bvh, denormalize,
                  point_triangle_distance, query_udf, voxelize_sparse)

__version__ = "0.1.0"

__all__ = [
    "TriangleMesh", "load_mesh", "save_mesh", "normalize_to_unit_cube",
    "TriangleBvh", "build_bvh", "query_udf", "point_triangle_distance",
    "SparseUdfVolume", "voxelize_sparse", "denormalize",
    "UBlockSet", "DenseBandField", "partition", "reassemble", "roundtrip_identity",
    "LogVaeParams", "SparseLatentSet", "init_params", "encode", "decode",
    "reparameterize", "kl_loss", "total_loss", "positional_encoding", "window_groups",
    "TrainConfig", "train", "train_step",
    "IsoConfig", "marching_cubes", "reconstruct",
    "PointSample", "sample_points", "chamfer", "fscore",
]
