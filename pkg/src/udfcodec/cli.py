"""Batch command-line front end.

Subcommands: voxelize, partition, reassemble, train, reconstruct, eval.
Options can come from a flat `key = value` config file (`--config`);
explicit flags win over config values. Exit codes: 0 success, 1 usage
error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import blocks as blk
from . import metrics as met
from . import trainer as trn
from . import udf
from .mesh import MeshError, load_mesh, normalize_to_unit_cube, save_mesh
from .meshing import IsoConfig, MeshingError, marching_cubes, reconstruct
from .model import ModelError, default_arch
from .trainer import TrainConfig, TrainError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


CONFIG_KEYS = {
    "n", "s", "alpha", "theta", "seed", "threads", "steps", "lr", "lam",
    "delta", "weight_decay", "grad_clip", "checkpoint", "checkpoint_every",
    "log_csv", "corpus", "stop_below", "k_samples",
}


def parse_config(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = val
    return values


def _apply_config(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    conf = parse_config(args.config)
    casts = {"n": int, "s": int, "alpha": int, "theta": float, "seed": int,
             "threads": int, "steps": int, "lr": float, "lam": float,
             "delta": float, "weight_decay": float, "grad_clip": float,
             "checkpoint": str, "checkpoint_every": int, "log_csv": str,
             "stop_below": float, "k_samples": int,
             "corpus": lambda v: [p.strip() for p in v.split(",") if p.strip()]}
    for key, val in conf.items():
        attr = {"n": "N"}.get(key, key)
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, casts[key](val))


def _set_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=threads)
    except ImportError:
        pass  # all computation is deterministic regardless of BLAS threads


def _add_common(p: _Parser, *, n=False, s=False, alpha=False, theta=False):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="thread cap (default: all cores; 1 = reference behavior)")
    if n:
        p.add_argument("--n", dest="N", type=int, default=None, help="volume resolution")
    if s:
        p.add_argument("--s", type=int, default=None, help="partition factor (blocks per axis)")
    if alpha:
        p.add_argument("--alpha", type=int, default=None, help="block padding (default 2)")
    if theta:
        p.add_argument("--theta", type=float, default=None, help="iso value (default 1/N)")


def cmd_voxelize(args) -> int:
    if args.N is None:
        raise UsageError("voxelize requires --n")
    mesh, ndeg = load_mesh(args.mesh)
    if ndeg:
        print(f"warning: {ndeg} degenerate triangles retained", file=sys.stderr)
    norm_mesh, _, _ = normalize_to_unit_cube(mesh)
    vol = udf.voxelize_sparse(norm_mesh, args.N)
    udf.save_udfv(vol, args.out)
    print(f"band voxels: {len(vol)}  occupancy: {len(vol) / args.N ** 3:.6g}")
    return 0


def cmd_partition(args) -> int:
    vol = udf.load_udfv(args.volume)
    s = args.s if args.s is not None else 8
    alpha = args.alpha if args.alpha is not None else 2
    blocks = blk.partition(vol, s, alpha)
    blk.save_ublk(blocks, args.out)
    print(f"active blocks: {blocks.L} / {s ** 3}")
    return 0


def cmd_reassemble(args) -> int:
    blocks = blk.load_ublk(args.blocks)
    field = blk.reassemble(blocks)
    # keep only band members so the output is a valid UDFV file
    keep = field.values.astype(np.float64) * udf.CLIP_VOXELS < udf.TAU_VOXELS
    vol = udf.SparseUdfVolume(N=field.N, coords=field.coords[keep],
                              values=field.values[keep])
    udf.save_udfv(vol, args.out)
    print(f"band voxels: {len(vol)} (of {len(field.coords)} touched)")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(
        N=args.N if args.N is not None else 64,
        s=args.s if args.s is not None else 8,
        alpha=args.alpha if args.alpha is not None else 2,
        steps=args.steps if args.steps is not None else 2000,
        lr=args.lr if args.lr is not None else 5e-5,
        weight_decay=args.weight_decay if args.weight_decay is not None else 0.01,
        grad_clip=args.grad_clip if args.grad_clip is not None else 1.0,
        lam=args.lam if args.lam is not None else 1e-6,
        delta=args.delta if args.delta is not None else 0.1,
        seed=args.seed if args.seed is not None else 0,
        checkpoint_path=args.checkpoint if args.checkpoint is not None else "model.logv",
        checkpoint_every=args.checkpoint_every if args.checkpoint_every is not None else 500,
        log_csv=args.log_csv,
        corpus=args.corpus or [],
        stop_below=args.stop_below,
    )
    _, _, rows = trn.train(cfg, resume_from=args.resume)
    if rows:
        step, total, l_udf, l_kl = rows[-1]
        print(f"step {step}: loss_total={total:.6g} loss_udf={l_udf:.6g} loss_kl={l_kl:.6g}")
    print(f"checkpoint: {cfg.checkpoint_path}")
    return 0


def cmd_reconstruct(args) -> int:
    mesh, _ = load_mesh(args.mesh)
    params, _ = trn.load_training_checkpoint(args.checkpoint, expected_arch=default_arch())
    out = reconstruct(
        mesh, params,
        N=args.N if args.N is not None else 64,
        s=args.s if args.s is not None else 8,
        alpha=args.alpha if args.alpha is not None else 2,
        theta=args.theta,
        seed=args.seed if args.seed is not None else 0,
        deterministic=args.deterministic,
    )
    if out.num_vertices == 0:
        print("empty reconstruction: no iso crossings", file=sys.stderr)
        return 0
    save_mesh(out, args.out)
    print(f"vertices: {out.num_vertices}  triangles: {out.num_triangles}")
    return 0


def cmd_eval(args) -> int:
    mesh_a, _ = load_mesh(args.mesh_a)
    mesh_b, _ = load_mesh(args.mesh_b)
    K = args.k_samples if args.k_samples is not None else 100_000
    seed = args.seed if args.seed is not None else 0
    A = met.sample_points(mesh_a, K, seed, source=str(args.mesh_a))
    B = met.sample_points(mesh_b, K, seed + 1, source=str(args.mesh_b))
    report = {
        "cd": met.chamfer(A, B),
        "f1_001": met.fscore(A, B, 0.001),
        "f1_01": met.fscore(A, B, 0.01),
        "K": K,
        "seed": seed,
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="udfcodec",
                     description="Sparse-voxel UDF geometry codec (block VAE)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="mesh -> sparse UDF band (UDFV)")
    p.add_argument("mesh")
    p.add_argument("out")
    _add_common(p, n=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("partition", help="UDFV -> padded blocks (UBLK)")
    p.add_argument("volume")
    p.add_argument("out")
    _add_common(p, s=True, alpha=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("reassemble", help="UBLK -> averaged band (UDFV)")
    p.add_argument("blocks")
    p.add_argument("out")
    _add_common(p)
    p.set_defaults(func=cmd_reassemble)

    p = sub.add_parser("train", help="train the codec on a mesh corpus")
    p.add_argument("corpus", nargs="*", help="OBJ files (or set `corpus` in --config)")
    _add_common(p, n=True, s=True, alpha=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--log-csv", dest="log_csv", default=None)
    p.add_argument("--stop-below", dest="stop_below", type=float, default=None)
    p.add_argument("--resume", default=None, help="resume from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="mesh -> codec -> mesh")
    p.add_argument("mesh")
    p.add_argument("out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="decode from the latent mean instead of sampling")
    _add_common(p, n=True, s=True, alpha=True, theta=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="chamfer distance and F-scores between meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--out", default=None, help="write the JSON report here too")
    p.add_argument("--k-samples", dest="k_samples", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args)
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (MeshError, udf.UdfError, blk.BlockError, ModelError, MeshingError,
            met.MetricsError, TrainError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
