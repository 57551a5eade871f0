"""Minimal reverse-mode autodiff over dense numpy tensors.

Just enough for the block VAE: 3D convolution, max-pool, nearest upsample,
matmul/linear, layer norm, softmax, GELU, row gather/scatter, elementwise
ops, Huber and reductions. Tensors are immutable after creation; the tape
is the implicit closure graph, replayed once per backward() in reverse
topological order. All reductions go through numpy's pairwise summation,
so repeated runs are bit-identical.

Gradient checks are only meaningful in float64; training runs float32.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape),
                                 dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_const(x, like: Tensor):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=like.dtype)


def _make(data, parents, backward):
    need = any(p.requires_grad for p in parents)
    return Tensor(data, parents=tuple(p for p in parents if isinstance(p, Tensor)),
                  backward=backward if need else None)


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into .grad of every reachable tensor."""
    if loss.data.shape != ():
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.accum_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b) -> Tensor:
    bd = _as_const(b, a)
    out_data = a.data + bd

    def back(g):
        a.accum_grad(g)
        if isinstance(b, Tensor):
            b.accum_grad(_unbroadcast(g, b.data.shape))
    return _make(out_data, (a, b) if isinstance(b, Tensor) else (a,), back)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (bias-style broadcasting only)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def sub(a: Tensor, b) -> Tensor:
    return add(a, mul_scalar(b, -1.0) if isinstance(b, Tensor) else -_as_const(b, a))


def mul(a: Tensor, b) -> Tensor:
    bd = _as_const(b, a)
    out_data = a.data * bd

    def back(g):
        a.accum_grad(g * bd)
        if isinstance(b, Tensor):
            b.accum_grad(_unbroadcast(g * a.data, b.data.shape))
    return _make(out_data, (a, b) if isinstance(b, Tensor) else (a,), back)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    sv = a.dtype.type(s)

    def back(g):
        a.accum_grad(g * sv)
    return _make(a.data * sv, (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        a.accum_grad(g * 2.0 * a.data)
    return _make(a.data * a.data, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        a.accum_grad(g * out_data)
    return _make(out_data, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, FD-checkable."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def back(g):
        d = a.data * a.data
        d *= -0.5
        np.exp(d, out=d)
        d *= _INV_SQRT2PI
        d *= a.data
        d += cdf
        d *= g
        a.accum_grad(d)
    return _make(out_data, (a,), back)


def tsum(a: Tensor) -> Tensor:
    def back(g):
        a.accum_grad(np.broadcast_to(g, a.shape).copy())
    return _make(a.data.sum(), (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        a.accum_grad(np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True))
    return _make(a.data.mean(), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        a.accum_grad(g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), back)


def huber_mean(pred: Tensor, target, delta: float) -> Tensor:
    """Mean Huber loss against a constant target of the same shape."""
    td = _as_const(target, pred)
    e = pred.data - td
    ae = np.abs(e)
    quad = ae <= delta
    per = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    n = per.size

    def back(g):
        pred.accum_grad(g * np.clip(e, -delta, delta) / n)
    return _make(per.mean(), (pred,), back)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def back(g):
        a.accum_grad(g @ b.data.T)
        b.accum_grad(a.data.T @ g)
    return _make(out_data, (a, b), back)


def transpose2d(a: Tensor) -> Tensor:
    def back(g):
        a.accum_grad(g.T)
    return _make(a.data.T, (a,), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Rows of x mapped through w, plus bias: x @ w + b."""
    return add(matmul(x, w), b)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.accum_grad(gx)
    return _make(x.data[idx], (x,), back)


def scatter_rows(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of x at positions idx of a zero (n, ...) tensor; idx unique."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out_data[idx] = x.data

    def back(g):
        x.accum_grad(g[idx])
    return _make(out_data, (x,), back)


def softmax_last(a: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    m = a.data.max(axis=-1, keepdims=True)
    ex = np.exp(a.data - m)
    out_data = ex / ex.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a.accum_grad(out_data * (g - dot))
    return _make(out_data, (a,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
        dmu = -(dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / d) * xc.sum(axis=-1, keepdims=True)
        x.accum_grad(dxhat * inv + dvar * 2.0 * xc / d + dmu / d)
        gain.accum_grad(_unbroadcast(g * xhat, gain.shape))
        bias.accum_grad(_unbroadcast(g, bias.shape))
    return _make(xhat * gain.data + bias.data, (x, gain, bias), back)


def groupnorm3d(x: Tensor, gain: Tensor, bias: Tensor, groups: int,
                eps: float = 1e-5) -> Tensor:
    """Standardize (B, C, S, S, S) over channel groups and all spatial
    positions, then scale and shift per channel."""
    B, C = x.shape[0], x.shape[1]
    if C % groups != 0:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    n = (C // groups) * x.shape[2] * x.shape[3] * x.shape[4]
    xr = x.data.reshape(B, groups, n)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xh = xhat.reshape(x.shape)
    gb = gain.data.reshape(1, C, 1, 1, 1)

    def back(g):
        gain.accum_grad((g * xh).sum(axis=(0, 2, 3, 4)))
        bias.accum_grad(g.sum(axis=(0, 2, 3, 4)))
        gx = (g * gb).reshape(B, groups, n)
        m1 = gx.mean(axis=2, keepdims=True)
        m2 = (gx * xhat).mean(axis=2, keepdims=True)
        x.accum_grad((inv * (gx - m1 - xhat * m2)).reshape(x.shape))
    return _make(xh * gb + bias.data.reshape(1, C, 1, 1, 1), (x, gain, bias), back)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for [T, d] token matrices."""
    d = q.shape[-1]
    scores = mul_scalar(matmul(q, transpose2d(k)), 1.0 / np.sqrt(d))
    return matmul(softmax_last(scores), v)


# ---------------------------------------------------------------------------
# volumetric ops

# cap on the im2col patch buffer; batches are chunked to stay under it.
# Small enough that a chunk's columns stay cache-resident on one core.
_CONV_CHUNK_BYTES = 4 * 2 ** 20


def _tap_slices(k, stride, od):
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                yield (slice(dx, dx + stride * od[0], stride),
                       slice(dy, dy + stride * od[1], stride),
                       slice(dz, dz + stride * od[2], stride))


def _im2col(xcl, k, stride, od):
    """channels-last (B,S,S,S,Cin) -> (B, od^3, k^3*Cin) patch matrix."""
    B, cin = xcl.shape[0], xcl.shape[-1]
    n_out = od[0] * od[1] * od[2]
    cols = np.empty((B, n_out, k ** 3, cin), dtype=xcl.dtype)
    for t, sl in enumerate(_tap_slices(k, stride, od)):
        cols[:, :, t, :] = xcl[(slice(None),) + sl].reshape(B, n_out, cin)
    return cols.reshape(B, n_out, k ** 3 * cin)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[B,Cin,S,S,S] with w[Cout,Cin,k,k,k] plus bias.

    Implemented as im2col + one GEMM per batch chunk; the 27-tap gather is
    a fixed-order copy, so results are deterministic at any chunk size.
    """
    B, cin, sx, sy, sz = x.shape
    cout, cin_w, k, _, _ = w.shape
    if cin != cin_w:
        raise ValueError(f"conv3d channel mismatch: x has {cin}, w expects {cin_w}")
    if stride < 1 or min(sx, sy, sz) + 2 * pad < k:
        raise ValueError("conv3d: spatial dims + 2*pad must cover the kernel")
    # channels-last internally so tap gathers copy contiguous runs
    xcl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1))
    if pad:
        xcl = np.pad(xcl, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    od = tuple((s + 2 * pad - k) // stride + 1 for s in (sx, sy, sz))
    n_out = od[0] * od[1] * od[2]
    # w as (k^3*Cin, Cout), taps ordered to match _im2col
    wmat = w.data.transpose(2, 3, 4, 1, 0).reshape(k ** 3 * cin, cout)
    per_item = n_out * k ** 3 * cin * xcl.dtype.itemsize
    chunk = max(1, min(B, _CONV_CHUNK_BYTES // max(per_item, 1)))

    out_cl = np.empty((B, n_out, cout), dtype=x.dtype)
    for s in range(0, B, chunk):
        out_cl[s:s + chunk] = _im2col(xcl[s:s + chunk], k, stride, od) @ wmat
    out_data = np.ascontiguousarray(
        out_cl.reshape(B, *od, cout).transpose(0, 4, 1, 2, 3)) + b.data[None, :, None, None, None]

    def back(g):
        b.accum_grad(g.sum(axis=(0, 2, 3, 4)))
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(B, n_out, cout)
        dwmat = np.zeros_like(wmat)
        dxcl = np.zeros_like(xcl)
        for s in range(0, B, chunk):
            cols = _im2col(xcl[s:s + chunk], k, stride, od)
            gc = gt[s:s + chunk]
            nb = gc.shape[0]
            dwmat += cols.reshape(nb * n_out, -1).T @ gc.reshape(nb * n_out, cout)
            dcols = (gc @ wmat.T).reshape(nb, n_out, k ** 3, cin)
            for t, sl in enumerate(_tap_slices(k, stride, od)):
                dxcl[(slice(s, s + nb),) + sl] += dcols[:, :, t, :].reshape(nb, *od, cin)
        w.accum_grad(dwmat.reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2))
        if pad:
            dxcl = dxcl[:, pad:sx + pad, pad:sy + pad, pad:sz + pad, :]
        x.accum_grad(np.ascontiguousarray(dxcl.transpose(0, 4, 1, 2, 3)))
    return _make(out_data, (x, w, b), back)


def maxpool3d(x: Tensor, k: int = 2) -> Tensor:
    """Window max with stride == k; ties route gradient to the first index."""
    B, C, sx, sy, sz = x.shape
    if sx % k or sy % k or sz % k:
        raise ValueError(f"maxpool3d: spatial dims {x.shape[2:]} not divisible by {k}")
    ox, oy, oz = sx // k, sy // k, sz // k
    win = x.data.reshape(B, C, ox, k, oy, k, oz, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(B, C, ox, oy, oz, k ** 3)
    arg = win.argmax(axis=-1)  # first max on ties
    out_data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((B, C, ox, oy, oz, k ** 3), dtype=x.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, ox, oy, oz, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        x.accum_grad(gw.reshape(B, C, sx, sy, sz))
    return _make(out_data, (x,), back)


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Replicate each voxel factor^3 times; backward sums over replicas."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        def back1(g):
            x.accum_grad(g)
        return _make(x.data.copy(), (x,), back1)
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)

    def back(g):
        B, C, sx, sy, sz = x.shape
        gr = g.reshape(B, C, sx, factor, sy, factor, sz, factor)
        x.accum_grad(gr.sum(axis=(3, 5, 7)))
    return _make(out_data, (x,), back)


# per-axis fold of a 3-tap kernel into the 2-tap kernel seen by each output
# parity after a nearest x2 upsample: even outputs read taps (w0, w1+w2) at
# source offsets (0, 1) into the padded grid, odd ones (w0+w1, w2) at (1, 2)
_PARITY_FOLD = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]],
                         [[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])


def upsample2_conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """conv3d(upsample_nearest3d(x, 2), w, b, pad=1) computed at x resolution.

    A nearest x2 upsample makes adjacent voxel pairs share a value, so the
    k=3 convolution collapses to a k=2 one per output parity class with
    weights folded pairwise. Eight parity GEMMs on the small grid replace
    one on the upsampled grid, cutting memory traffic roughly eightfold.
    """
    B, cin, sx, sy, sz = x.shape
    cout, cin_w, k, _, _ = w.shape
    if cin != cin_w:
        raise ValueError(f"upsample2_conv3d channel mismatch: x has {cin}, w expects {cin_w}")
    if k != 3:
        raise ValueError("upsample2_conv3d requires a 3x3x3 kernel")
    od = (sx, sy, sz)
    n_out = sx * sy * sz
    xcl = np.pad(np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1)),
                 ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    fold = _PARITY_FOLD.astype(x.dtype)
    # wmats[px,py,pz]: (8*cin, cout) folded kernel for that output parity
    wfold = np.einsum('pat,qbu,rcv,otuvi->pqrabcio', fold, fold, fold,
                      w.data.transpose(0, 2, 3, 4, 1))
    per_item = n_out * 8 * cin * xcl.dtype.itemsize
    chunk = max(1, min(B, _CONV_CHUNK_BYTES // max(per_item, 1)))

    def parity_cols(s, nb, base):
        cols = np.empty((nb, n_out, 8, cin), dtype=xcl.dtype)
        for t, (a, c, d) in enumerate(np.ndindex(2, 2, 2)):
            cols[:, :, t, :] = xcl[s:s + nb,
                                   base[0] + a:base[0] + a + sx,
                                   base[1] + c:base[1] + c + sy,
                                   base[2] + d:base[2] + d + sz, :].reshape(nb, n_out, cin)
        return cols.reshape(nb, n_out, 8 * cin)

    out_data = np.empty((B, cout, 2 * sx, 2 * sy, 2 * sz), dtype=x.dtype)
    for p in np.ndindex(2, 2, 2):
        wmat = wfold[p].reshape(8 * cin, cout)
        oc = np.empty((B, n_out, cout), dtype=x.dtype)
        for s in range(0, B, chunk):
            oc[s:s + chunk] = parity_cols(s, min(chunk, B - s), p) @ wmat
        out_data[:, :, p[0]::2, p[1]::2, p[2]::2] = \
            np.ascontiguousarray(oc.reshape(B, *od, cout).transpose(0, 4, 1, 2, 3))
    out_data += b.data[None, :, None, None, None]

    def back(g):
        b.accum_grad(g.sum(axis=(0, 2, 3, 4)))
        dwfold = np.zeros_like(wfold)
        dxcl = np.zeros_like(xcl)
        for p in np.ndindex(2, 2, 2):
            wmat = wfold[p].reshape(8 * cin, cout)
            dwmat = np.zeros_like(wmat)
            gt = np.ascontiguousarray(
                g[:, :, p[0]::2, p[1]::2, p[2]::2].transpose(0, 2, 3, 4, 1)).reshape(B, n_out, cout)
            for s in range(0, B, chunk):
                nb = min(chunk, B - s)
                cols = parity_cols(s, nb, p)
                gc = gt[s:s + nb]
                dwmat += cols.reshape(nb * n_out, -1).T @ gc.reshape(nb * n_out, cout)
                dcols = (gc @ wmat.T).reshape(nb, n_out, 8, cin)
                for t, (a, c, d) in enumerate(np.ndindex(2, 2, 2)):
                    dxcl[s:s + nb,
                         p[0] + a:p[0] + a + sx,
                         p[1] + c:p[1] + c + sy,
                         p[2] + d:p[2] + d + sz, :] += dcols[:, :, t, :].reshape(nb, *od, cin)
            dwfold[p] = dwmat.reshape(8, cin, cout).reshape(2, 2, 2, cin, cout)
        dw = np.einsum('pat,qbu,rcv,pqrabcio->otuvi', fold, fold, fold, dwfold)
        w.accum_grad(np.ascontiguousarray(dw.transpose(0, 4, 1, 2, 3)))
        dxcl_in = dxcl[:, 1:sx + 1, 1:sy + 1, 1:sz + 1, :]
        x.accum_grad(np.ascontiguousarray(dxcl_in.transpose(0, 4, 1, 2, 3)))
    return _make(out_data, (x, w, b), back)
