"""Desk-scale training loop: AdamW on the block VAE, one shape per step."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .autograd import backward
from .blocks import UBlockSet, partition
from .mesh import load_mesh, normalize_to_unit_cube
from .model import LogVaeParams
from .udf import voxelize_sparse

OPTS_MAGIC = b"OPTS"


class TrainError(RuntimeError):
    """Divergence or invalid training configuration."""


@dataclass
class TrainConfig:
    N: int = 64
    s: int = 8
    alpha: int = 2
    steps: int = 2000
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lam: float = 1e-6
    delta: float = 0.1
    seed: int = 0
    checkpoint_path: str = "model.logv"
    checkpoint_every: int = 500
    log_csv: str | None = None
    corpus: list[str] = field(default_factory=list)
    stop_below: float | None = None   # optional early stop on the Huber term

    def validate(self):
        if self.lr <= 0:
            raise TrainError("learning rate must be positive")
        if self.steps < 1:
            raise TrainError("steps must be >= 1")
        if self.s < 1 or self.N % self.s != 0:
            raise TrainError(f"s={self.s} does not divide N={self.N}")


@dataclass
class AdamWState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_opt_state(params: LogVaeParams) -> AdamWState:
    return AdamWState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
    )


def _global_grad_norm(params: LogVaeParams) -> float:
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def adamw_update(params: LogVaeParams, opt: AdamWState, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam step, in place."""
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, t in params.tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * t.data)


def train_step(params: LogVaeParams, batch: UBlockSet, opt: AdamWState,
               cfg: TrainConfig) -> tuple[float, float, float]:
    """Forward, backward, clip, AdamW. Returns (total, huber, kl) loss values."""
    params.zero_grad()
    sample_seed = np.random.SeedSequence([cfg.seed, opt.step]).generate_state(1)[0]
    latents = mdl.encode(batch, params, rng_seed=int(sample_seed))
    pred = mdl.decode(latents, params, N=batch.N, s=batch.s, alpha=batch.alpha)
    loss, l_udf, l_kl = mdl.total_loss(pred, batch, latents.mu, latents.logvar,
                                       cfg.lam, cfg.delta)
    if not np.isfinite(loss.data):
        for name, t in params.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise TrainError(f"non-finite loss; first bad tensor: {name}")
        raise TrainError("non-finite loss with finite parameters (bad activations)")
    backward(loss)
    if cfg.grad_clip > 0:
        norm = _global_grad_norm(params)
        if norm > cfg.grad_clip:
            scale = params["enc.conv1.w"].dtype.type(cfg.grad_clip / norm)
            for t in params.tensors.values():
                if t.grad is not None:
                    t.grad *= scale
    adamw_update(params, opt, cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    return float(loss.data), float(l_udf.data), float(l_kl.data)


def _pack_opt_state(opt: AdamWState) -> bytes:
    parts = [struct.pack("<Q", opt.step)]
    for kind, table in (("m", opt.m), ("v", opt.v)):
        for name, arr in table.items():
            parts.append(mdl._pack_tensor(f"{kind}:{name}", arr))
    return b"".join(parts)


def _unpack_opt_state(payload: bytes, params: LogVaeParams) -> AdamWState:
    (step,) = struct.unpack_from("<Q", payload, 0)
    off = 8
    opt = init_opt_state(params)
    opt.step = step
    while off < len(payload):
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", payload, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", payload, off)
        off += 4 * rank
        count = int(np.prod(dims))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        kind, pname = name.split(":", 1)
        dtype = params.tensors[pname].data.dtype
        (opt.m if kind == "m" else opt.v)[pname] = arr.astype(dtype)
    return opt


def save_training_checkpoint(params: LogVaeParams, opt: AdamWState, path) -> None:
    mdl.save_checkpoint(params, path, extra_sections={OPTS_MAGIC: _pack_opt_state(opt)})


def load_training_checkpoint(path, expected_arch=None, dtype=np.float32):
    params, sections = mdl.load_checkpoint(path, expected_arch=expected_arch, dtype=dtype)
    if OPTS_MAGIC not in sections:
        raise TrainError(f"{path}: checkpoint has no optimizer state")
    return params, _unpack_opt_state(sections[OPTS_MAGIC], params)


def load_corpus(cfg: TrainConfig) -> list[UBlockSet]:
    """Meshes -> normalized -> sparse UDF -> padded blocks, one set per shape."""
    if not cfg.corpus:
        raise TrainError("training corpus is empty")
    batches = []
    for path in cfg.corpus:
        mesh, _ = load_mesh(path)
        mesh, _, _ = normalize_to_unit_cube(mesh)
        vol = voxelize_sparse(mesh, cfg.N)
        batches.append(partition(vol, cfg.s, cfg.alpha))
    return batches


def train(cfg: TrainConfig, params: LogVaeParams | None = None,
          resume_from: str | None = None) -> tuple[LogVaeParams, AdamWState, list[tuple]]:
    """Run the loop; returns (params, opt_state, per-step loss rows)."""
    cfg.validate()
    batches = load_corpus(cfg)
    if resume_from is not None:
        params, opt = load_training_checkpoint(resume_from)
    else:
        if params is None:
            params = mdl.init_params(seed=cfg.seed, dtype=np.float32)
        opt = init_opt_state(params)
    rows = []
    csv_lines = ["step,loss_total,loss_udf,loss_kl"]
    for _ in range(cfg.steps):
        batch = batches[opt.step % len(batches)]
        step_no = opt.step + 1
        total, l_udf, l_kl = train_step(params, batch, opt, cfg)
        rows.append((step_no, total, l_udf, l_kl))
        csv_lines.append(f"{step_no},{total:.10g},{l_udf:.10g},{l_kl:.10g}")
        if cfg.checkpoint_every > 0 and step_no % cfg.checkpoint_every == 0:
            save_training_checkpoint(params, opt, cfg.checkpoint_path)
        if cfg.stop_below is not None and l_udf < cfg.stop_below:
            break
    save_training_checkpoint(params, opt, cfg.checkpoint_path)
    if cfg.log_csv:
        Path(cfg.log_csv).write_text("\n".join(csv_lines) + "\n")
    return params, opt, rows
