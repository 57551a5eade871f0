"""Block VAE: per-block conv encoder to one latent token, shifted-window
attention across tokens, reparameterized 16-channel latent, mirrored decoder.

The architecture is fixed by `default_arch()`; parameter shapes depend only
on (padded block side, channel widths, d_model, latent width), never on the
volume resolution N, so the same weights serve any N with D and alpha fixed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blocks import UBlockSet

LOGV_MAGIC = b"LOGV"
LOGV_VERSION = 1
# block coordinates span [0, s) with s ~ 8-16, so the sinusoid wavelengths
# are spread over [2.6, 21] grid units; a transformer-style base of 1e4
# would leave most channels nearly constant over that range
POSENC_FREQ_MAX = 2.4
POSENC_FREQ_RATIO = 8.0


class ModelError(ValueError):
    """Architecture/shape mismatch or malformed checkpoint."""


def default_arch() -> dict:
    return {
        "padded_side": 12,
        "channels": [16, 32],
        "d_model": 96,
        "latent": 16,
        "layers": 2,
        "window": 4,
        "mlp_ratio": 2,
        "gn_groups": 8,
    }


@dataclass
class LogVaeParams:
    arch: dict
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "LogVaeParams":
        return LogVaeParams(self.arch, {
            k: Tensor(t.data.astype(dtype), requires_grad=True) for k, t in self.tensors.items()
        })


@dataclass
class SparseLatentSet:
    """One latent token per active block, at that block's coordinate."""

    coords: np.ndarray        # (L, 3) sorted lexicographically
    mu: Tensor                # (L, latent)
    logvar: Tensor            # (L, latent)
    sample: Tensor | None     # mu + exp(logvar/2) * eps
    eps: np.ndarray | None    # the recorded standard-normal draw


@dataclass
class DecodedBlocks:
    """Decoder output in loss space (unbounded reals)."""

    N: int
    s: int
    alpha: int
    coords: np.ndarray
    values: Tensor            # (L, 1, P, P, P)

    def to_ublockset(self) -> UBlockSet:
        """Clamp to the normalized [0,1] range for reassembly."""
        data = np.clip(self.values.data, 0.0, 1.0).astype(np.float32)
        return UBlockSet(N=self.N, s=self.s, alpha=self.alpha,
                         coords=self.coords, tensors=data[:, 0])


def _init_tensors(arch: dict, seed: int, dtype) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    c1, c2 = arch["channels"]
    d = arch["d_model"]
    lat = arch["latent"]
    k = 3

    def w(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    t: dict[str, Tensor] = {}
    t["enc.conv1.w"] = w((c1, 1, k, k, k), k ** 3)
    t["enc.conv1.b"] = zeros(c1)
    t["enc.conv2.w"] = w((c2, c1, k, k, k), c1 * k ** 3)
    t["enc.conv2.b"] = zeros(c2)
    if arch.get("gn_groups", 0):
        for name, ch in (("enc.gn1", c1), ("enc.gn2", c2), ("dec.gn1", c1)):
            t[f"{name}.g"] = ones(ch)
            t[f"{name}.b"] = zeros(ch)
    t["enc.conv3.w"] = w((d, c2, k, k, k), c2 * k ** 3)
    t["enc.conv3.b"] = zeros(d)
    for side in ("enc", "dec"):
        for i in range(arch["layers"]):
            pre = f"{side}.layers.{i}"
            t[f"{pre}.ln1.g"] = ones(d)
            t[f"{pre}.ln1.b"] = zeros(d)
            for name in ("wq", "wk", "wv"):
                t[f"{pre}.attn.{name}"] = w((d, d), d)
            # zero residual-branch outputs: every transformer layer starts
            # as the identity, which keeps the whole stack well conditioned
            t[f"{pre}.attn.wo"] = zeros((d, d))
            for name in ("bq", "bk", "bv", "bo"):
                t[f"{pre}.attn.{name}"] = zeros(d)
            t[f"{pre}.ln2.g"] = ones(d)
            t[f"{pre}.ln2.b"] = zeros(d)
            h = d * arch["mlp_ratio"]
            t[f"{pre}.mlp.w1"] = w((d, h), d)
            t[f"{pre}.mlp.b1"] = zeros(h)
            t[f"{pre}.mlp.w2"] = zeros((h, d))
            t[f"{pre}.mlp.b2"] = zeros(d)
    t["enc.mu.w"] = w((d, lat), d)
    t["enc.mu.b"] = zeros(lat)
    t["enc.logvar.w"] = w((d, lat), d)
    # start with near-deterministic latents: sampling noise otherwise sets a
    # reconstruction-loss floor that a tiny KL weight never pushes back down
    t["enc.logvar.b"] = Tensor(np.full(lat, -16.0, dtype=dtype), requires_grad=True)
    t["dec.proj.w"] = w((lat, d), lat)
    t["dec.proj.b"] = zeros(d)
    t["dec.expand.w"] = w((d, c2 * 27), d)
    t["dec.expand.b"] = zeros(c2 * 27)
    t["dec.conv1.w"] = w((c1, c2, k, k, k), c2 * k ** 3)
    t["dec.conv1.b"] = zeros(c1)
    # zero output weights with the bias at the pad/clip value 1.0: the
    # out-of-band bulk of every block starts exactly converged, so training
    # only ever sees residuals on the narrow band
    t["dec.conv2.w"] = zeros((1, c1, k, k, k))
    t["dec.conv2.b"] = Tensor(np.ones(1, dtype=dtype), requires_grad=True)
    return t


def init_params(seed: int = 0, dtype=np.float32, arch: dict | None = None) -> LogVaeParams:
    arch = dict(arch or default_arch())
    if arch["d_model"] % 6 != 0:
        raise ModelError("d_model must be divisible by 6 for the positional encoding")
    return LogVaeParams(arch, _init_tensors(arch, seed, dtype))


def positional_encoding(coords: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of integer 3D coordinates, d_model/6 (sin, cos)
    pairs per axis at geometrically spaced frequencies."""
    if d_model % 6 != 0:
        raise ModelError(f"d_model={d_model} not divisible by 6")
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    nf = d_model // 6
    freqs = POSENC_FREQ_MAX * POSENC_FREQ_RATIO ** (-np.arange(nf) / nf)
    phase = coords[:, :, None] * freqs[None, None, :]   # (L, 3, nf)
    enc = np.concatenate([np.sin(phase), np.cos(phase)], axis=2)  # (L, 3, 2*nf)
    return enc.reshape(len(coords), d_model)


def window_groups(coords: np.ndarray, w: int, shifted: bool) -> list[np.ndarray]:
    """Partition token indices by w^3 window cell; shifted layers offset the
    window grid by w//2. Groups are ordered by cell coordinate, indices
    ascending within each group."""
    if w < 1:
        raise ModelError("window size must be >= 1")
    coords = np.asarray(coords, dtype=np.int64)
    cells = (coords + (w // 2 if shifted else 0)) // w
    keys = (cells[:, 0] << 42) + (cells[:, 1] << 21) + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    groups = []
    start = 0
    sorted_keys = keys[order]
    for i in range(1, len(order) + 1):
        if i == len(order) or sorted_keys[i] != sorted_keys[start]:
            groups.append(np.sort(order[start:i]))
            start = i
    return groups


def _transformer_layer(h: Tensor, coords: np.ndarray, params: LogVaeParams,
                       prefix: str, shifted: bool) -> Tensor:
    """Pre-norm windowed attention block followed by a pre-norm MLP."""
    p = params
    L = h.shape[0]
    a = ag.layernorm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    for g in window_groups(coords, p.arch["window"], shifted):
        sub = ag.gather_rows(a, g)
        q = ag.linear(sub, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
        k = ag.linear(sub, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"])
        v = ag.linear(sub, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])
        o = ag.linear(ag.attention(q, k, v), p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
        h = ag.add(h, ag.scatter_rows(o, g, L))
    m = ag.layernorm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = ag.linear(ag.gelu(ag.linear(m, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])),
                  p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return ag.add(h, m)


def _canonical_order(blocks: UBlockSet) -> np.ndarray:
    c = blocks.coords.astype(np.int64)
    return np.argsort((c[:, 0] << 42) + (c[:, 1] << 21) + c[:, 2], kind="stable")


def encode(blocks: UBlockSet, params: LogVaeParams, rng_seed: int | None = 0) -> SparseLatentSet:
    """Blocks -> one latent token each. Blocks are canonically sorted first,
    so the result is invariant to input block order."""
    arch = params.arch
    if blocks.padded_side != arch["padded_side"]:
        raise ModelError(f"block side {blocks.padded_side} != architecture side {arch['padded_side']}")
    perm = _canonical_order(blocks)
    coords = blocks.coords[perm]
    dtype = params["enc.conv1.w"].dtype
    # center at the pad/clip value so the constant out-of-band bulk maps to
    # zero and conv activations carry only the informative band signal
    x = Tensor(blocks.tensors[perm][:, None].astype(dtype) - dtype.type(1.0))

    gn = arch.get("gn_groups", 0)
    h = ag.conv3d(x, params["enc.conv1.w"], params["enc.conv1.b"], pad=1)
    if gn:
        h = ag.groupnorm3d(h, params["enc.gn1.g"], params["enc.gn1.b"], gn)
    h = ag.maxpool3d(ag.gelu(h))
    h = ag.conv3d(h, params["enc.conv2.w"], params["enc.conv2.b"], pad=1)
    if gn:
        h = ag.groupnorm3d(h, params["enc.gn2.g"], params["enc.gn2.b"], gn)
    h = ag.maxpool3d(ag.gelu(h))
    h = ag.conv3d(h, params["enc.conv3.w"], params["enc.conv3.b"])  # (L, d, 1, 1, 1)
    h = ag.reshape(h, (len(coords), arch["d_model"]))
    h = ag.add(h, positional_encoding(coords, arch["d_model"]).astype(dtype))
    for i in range(arch["layers"]):
        h = _transformer_layer(h, coords, params, f"enc.layers.{i}", shifted=bool(i % 2))
    mu = ag.linear(h, params["enc.mu.w"], params["enc.mu.b"])
    logvar = ag.linear(h, params["enc.logvar.w"], params["enc.logvar.b"])
    sample, eps = (None, None)
    if rng_seed is not None:
        sample, eps = reparameterize(mu, logvar, rng_seed)
    return SparseLatentSet(coords=coords, mu=mu, logvar=logvar, sample=sample, eps=eps)


def reparameterize(mu: Tensor, logvar: Tensor, rng_seed: int) -> tuple[Tensor, np.ndarray]:
    """sample = mu + exp(logvar/2) * eps with a seeded standard-normal eps."""
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    sample = ag.add(mu, ag.mul(ag.exp(ag.mul_scalar(logvar, 0.5)), eps))
    return sample, eps


def decode(latents: SparseLatentSet, params: LogVaeParams, N: int, s: int, alpha: int,
           use_mean: bool = False) -> DecodedBlocks:
    """Latent tokens back to padded block tensors at the same coordinates."""
    arch = params.arch
    coords = latents.coords
    z = latents.mu if (use_mean or latents.sample is None) else latents.sample
    dtype = params["dec.proj.w"].dtype
    h = ag.linear(z, params["dec.proj.w"], params["dec.proj.b"])
    h = ag.add(h, positional_encoding(coords, arch["d_model"]).astype(dtype))
    for i in range(arch["layers"]):
        h = _transformer_layer(h, coords, params, f"dec.layers.{i}", shifted=bool(i % 2))
    c1, c2 = arch["channels"]
    h = ag.linear(h, params["dec.expand.w"], params["dec.expand.b"])
    h = ag.gelu(ag.reshape(h, (len(coords), c2, 3, 3, 3)))
    h = ag.upsample2_conv3d(h, params["dec.conv1.w"], params["dec.conv1.b"])
    gn = arch.get("gn_groups", 0)
    if gn:
        h = ag.groupnorm3d(h, params["dec.gn1.g"], params["dec.gn1.b"], gn)
    h = ag.gelu(h)
    h = ag.upsample2_conv3d(h, params["dec.conv2.w"], params["dec.conv2.b"])
    if h.shape[2] != arch["padded_side"]:
        raise ModelError(f"decoded side {h.shape[2]} != {arch['padded_side']}")
    return DecodedBlocks(N=N, s=s, alpha=alpha, coords=coords, values=h)


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over all entries of -1/2 (1 + logvar - mu^2 - exp(logvar))."""
    inner = ag.add(ag.sub(ag.add(ag.square(mu), ag.exp(logvar)), logvar), -1.0)
    return ag.mul_scalar(ag.tmean(inner), 0.5)


def huber_udf_loss(pred: DecodedBlocks, target: UBlockSet, delta: float) -> Tensor:
    """Mean Huber over every voxel of every block."""
    perm = _canonical_order(target)
    if not np.array_equal(pred.coords, target.coords[perm]):
        raise ModelError("prediction and target block coordinates differ")
    return ag.huber_mean(pred.values, target.tensors[perm][:, None], delta)


def total_loss(pred: DecodedBlocks, target: UBlockSet, mu: Tensor, logvar: Tensor,
               lam: float, delta: float) -> tuple[Tensor, Tensor, Tensor]:
    """Huber reconstruction + lam * KL; returns (total, huber, kl)."""
    h = huber_udf_loss(pred, target, delta)
    k = kl_loss(mu, logvar)
    return ag.add(h, ag.mul_scalar(k, lam)), h, k


# ---------------------------------------------------------------------------
# checkpoint format

def _pack_tensor(name: str, data: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def save_checkpoint(params: LogVaeParams, path, extra_sections: dict[bytes, bytes] | None = None) -> None:
    arch_json = json.dumps(params.arch, sort_keys=True).encode()
    parts = [LOGV_MAGIC, struct.pack("<II", LOGV_VERSION, len(arch_json)), arch_json]
    for name, t in params.tensors.items():
        parts.append(_pack_tensor(name, t.data))
    for magic, payload in (extra_sections or {}).items():
        parts.append(magic + struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_arch: dict | None = None,
                    dtype=np.float32) -> tuple[LogVaeParams, dict[bytes, bytes]]:
    data = Path(path).read_bytes()
    if data[:4] != LOGV_MAGIC:
        raise ModelError(f"{path}: not a LOGV checkpoint")
    version, arch_len = struct.unpack_from("<II", data, 4)
    if version != LOGV_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arch = json.loads(data[off:off + arch_len])
    off += arch_len
    if expected_arch is not None and dict(expected_arch) != arch:
        raise ModelError(f"{path}: checkpoint architecture {arch} != expected {expected_arch}")
    tensors: dict[str, Tensor] = {}
    sections: dict[bytes, bytes] = {}
    while off < len(data):
        tag = data[off:off + 4]
        if tag.isalpha() and tag.isupper():  # section magic, e.g. b"OPTS"
            (plen,) = struct.unpack_from("<Q", data, off + 4)
            sections[tag] = data[off + 12:off + 12 + plen]
            off += 12 + plen
            continue
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return LogVaeParams(arch, tensors), sections
