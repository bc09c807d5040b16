"""Differentiable operators for the guided segmentation network.

Only the operators the model actually uses are provided. Every op runs in
float32, avoids BLAS-dispatched reductions (einsum stays unoptimized), and
is deterministic for fixed inputs on one platform.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, LabelError, ShapeError
from .tensor import Array, Tensor, prod, record_op

IGNORE_LABEL = 255

_f32 = np.float32


def _as_f32(x) -> Array:
    return np.ascontiguousarray(x, dtype=np.float32)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate a [C_in,H,W] map with [C_out,C_in,kh,kw] kernels.

    Zero padding; H' = floor((H + 2*pad - kh)/stride) + 1 and likewise W'.
    Float32 accumulation in a fixed kernel-major order, so the result is
    reproducible bit-for-bit and matches a direct nested-loop evaluation.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 3-d input and 4-d kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels but kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    h, w = x.shape[1], x.shape[2]
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    if pad:
        xp = np.zeros((c_in, hp, wp), dtype=np.float32)
        xp[:, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out_data = np.empty((c_out, ho, wo), dtype=np.float32)
    _kernels.conv2d_fwd(xp, np.ascontiguousarray(kernels.data), bias.data, stride, out_data)
    out = Tensor(out_data)

    need_x, need_w, need_b = x.requires_grad, kernels.requires_grad, bias.requires_grad

    def vjp(g: Array):
        g = _as_f32(g)
        gx = gw = gb = None
        if need_x:
            gxp = np.zeros((c_in, hp, wp), dtype=np.float32)
            _kernels.conv2d_bwd_input(g, kernels.data, stride, gxp)
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if need_w:
            gw = np.empty_like(kernels.data)
            _kernels.conv2d_bwd_weight(g, xp, stride, gw)
        if need_b:
            gb = g.sum(axis=(1, 2), dtype=np.float32)
        return gx, gw, gb

    return record_op(out, (x, kernels, bias), vjp)


# ---------------------------------------------------------------------------
# pointwise and structural ops

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, _f32(0.0)))

    def vjp(g: Array):
        return (np.where(x.data > 0, g, _f32(0.0)),)

    return record_op(out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def vjp(g: Array):
        return g, g

    return record_op(out, (a, b), vjp)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be [1,H,W] against a's [C,H,W]."""
    broadcast = (
        a.ndim == 3 and b.ndim == 3 and b.shape[0] == 1
        and a.shape[1:] == b.shape[1:] and a.shape[0] != 1
    )
    if not broadcast and a.shape != b.shape:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def vjp(g: Array):
        ga = g * b.data
        gb = g * a.data
        if broadcast:
            gb = gb.sum(axis=0, keepdims=True, dtype=np.float32)
        return ga, gb

    return record_op(out, (a, b), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack [C_i,H,W] maps along the channel axis, order preserved."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    hw = parts[0].shape[1:]
    for p in parts:
        if p.ndim != 3 or p.shape[1:] != hw:
            raise ShapeError(f"spatial extents differ: {p.shape} vs {parts[0].shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g: Array):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record_op(out, tuple(parts), vjp)


@lru_cache(maxsize=64)
def _resize_plan(n_src: int, n_dst: int):
    # half-pixel centers, clamped to the source range
    s = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    s = np.clip(s, 0.0, n_src - 1.0)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = (s - i0).astype(np.float32)
    return i0, i1, frac


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Resize [C,H,W] to [C,h2,w2] with half-pixel-center bilinear sampling."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [C,H,W], got {x.shape}")
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"target size must be >= 1, got {h2}x{w2}")
    h, w = x.shape[1], x.shape[2]
    y0, y1, fy = _resize_plan(h, h2)
    x0, x1, fx = _resize_plan(w, w2)
    wy0 = (_f32(1.0) - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = (_f32(1.0) - fx)[None, :]
    wx1 = fx[None, :]

    d = x.data
    out_data = (
        d[:, y0[:, None], x0[None, :]] * (wy0 * wx0)
        + d[:, y0[:, None], x1[None, :]] * (wy0 * wx1)
        + d[:, y1[:, None], x0[None, :]] * (wy1 * wx0)
        + d[:, y1[:, None], x1[None, :]] * (wy1 * wx1)
    )
    out = Tensor(out_data)

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        yy0 = np.broadcast_to(y0[:, None], (h2, w2))
        yy1 = np.broadcast_to(y1[:, None], (h2, w2))
        xx0 = np.broadcast_to(x0[None, :], (h2, w2))
        xx1 = np.broadcast_to(x1[None, :], (h2, w2))
        for c in range(x.shape[0]):
            gc = g[c]
            np.add.at(gx[c], (yy0, xx0), gc * (wy0 * wx0))
            np.add.at(gx[c], (yy0, xx1), gc * (wy0 * wx1))
            np.add.at(gx[c], (yy1, xx0), gc * (wy1 * wx0))
            np.add.at(gx[c], (yy1, xx1), gc * (wy1 * wx1))
        return (gx,)

    return record_op(out, (x,), vjp)


def tile_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a [C] vector to a constant [C,h,w] map."""
    if v.ndim != 1:
        raise ShapeError(f"tile_spatial expects a vector, got {v.shape}")
    out = Tensor(np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy())

    def vjp(g: Array):
        return (g.sum(axis=(1, 2), dtype=np.float32),)

    return record_op(out, (v,), vjp)


# ---------------------------------------------------------------------------
# pooling and guidance math

def masked_average(features: Tensor, mask: Tensor) -> tuple[Tensor, float]:
    """Average [C,H,W] features over a [1,H,W] soft mask.

    Returns (sum(mask*feat)/sum(mask), sum(mask)); an all-zero mask yields
    (zero vector, 0). Differentiable w.r.t. features only.
    """
    if features.ndim != 3 or mask.ndim != 3 or mask.shape[0] != 1:
        raise ShapeError(f"masked_average expects [C,H,W] and [1,H,W], got {features.shape}, {mask.shape}")
    if features.shape[1:] != mask.shape[1:]:
        raise ShapeError(f"spatial extents differ: {features.shape} vs {mask.shape}")
    m = mask.data[0]
    total = float(m.sum(dtype=np.float32))
    c = features.shape[0]
    if total == 0.0:
        out = Tensor(np.zeros(c, dtype=np.float32))

        def vjp_zero(g: Array):
            return np.zeros_like(features.data), None

        return record_op(out, (features, mask), vjp_zero), 0.0

    weights = m * _f32(1.0 / total)
    out = Tensor(np.einsum("chw,hw->c", features.data, weights, optimize=False))

    def vjp(g: Array):
        return g[:, None, None] * weights[None, :, :], None

    return record_op(out, (features, mask), vjp), total


def weighted_sum(vectors: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Sum of [C] vectors scaled by fixed scalar weights, in argument order."""
    if len(vectors) != len(weights) or not vectors:
        raise ShapeError("weighted_sum needs matching, non-empty vectors and weights")
    shape = vectors[0].shape
    for v in vectors:
        if v.shape != shape:
            raise ShapeError(f"vector shapes differ: {v.shape} vs {shape}")
    ws = [_f32(w) for w in weights]
    acc = vectors[0].data * ws[0]
    for v, w in zip(vectors[1:], ws[1:]):
        acc = acc + v.data * w
    out = Tensor(acc)

    def vjp(g: Array):
        return tuple(g * w for w in ws)

    return record_op(out, tuple(vectors), vjp)


def affine(weight: Tensor, x: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a [O,I] weight and [I] input."""
    if weight.ndim != 2 or x.ndim != 1 or bias.ndim != 1:
        raise ShapeError(f"affine expects [O,I], [I], [O]; got {weight.shape}, {x.shape}, {bias.shape}")
    o, i = weight.shape
    if x.shape[0] != i or bias.shape[0] != o:
        raise ShapeError(f"affine dims mismatch: {weight.shape} with {x.shape}, {bias.shape}")
    out = Tensor(np.einsum("oi,i->o", weight.data, x.data, optimize=False) + bias.data)

    def vjp(g: Array):
        gw = np.einsum("o,i->oi", g, x.data, optimize=False) if weight.requires_grad else None
        gx = np.einsum("oi,o->i", weight.data, g, optimize=False) if x.requires_grad else None
        return gw, gx, g

    return record_op(out, (weight, x, bias), vjp)


@lru_cache(maxsize=64)
def _validity_plan(h: int, w: int, kh: int, kw: int, pad: int) -> Array:
    # V[u,v,y,x] = 1 where tap (u,v) of output cell (y,x) lands inside the map
    ys = np.arange(h)[:, None] + np.arange(kh)[None, :] - pad     # [h,kh]
    xs = np.arange(w)[:, None] + np.arange(kw)[None, :] - pad     # [w,kw]
    vy = ((ys >= 0) & (ys < h)).T.astype(np.float32)              # [kh,h]
    vx = ((xs >= 0) & (xs < w)).T.astype(np.float32)              # [kw,w]
    v = vy[:, None, :, None] * vx[None, :, None, :]               # [kh,kw,h,w]
    v.setflags(write=False)
    return v


def const_conv2d(v: Tensor, kernels: Tensor, h: int, w: int, pad: int) -> Tensor:
    """conv2d of the channel-constant map tile(v, h, w), stride 1, no bias.

    Because every in-bounds tap reads the same value per channel, the
    response reduces to per-tap matvecs blended by boundary-validity maps,
    which is what makes cheap guidance updates possible.
    """
    if v.ndim != 1 or kernels.ndim != 4:
        raise ShapeError(f"const_conv2d expects [C] and [O,C,kh,kw], got {v.shape}, {kernels.shape}")
    o, c, kh, kw = kernels.shape
    if v.shape[0] != c:
        raise ShapeError(f"vector has {v.shape[0]} channels but kernels expect {c}")
    if 2 * pad + 1 != kh or 2 * pad + 1 != kw:
        raise ShapeError(f"const_conv2d supports same-size output only, got k={kh}x{kw}, pad={pad}")
    valid = _validity_plan(h, w, kh, kw, pad)
    taps = np.einsum("ocuv,c->ouv", kernels.data, v.data, optimize=False)
    out = Tensor(np.einsum("ouv,uvyx->oyx", taps, valid, optimize=False))

    def vjp(g: Array):
        g_taps = np.einsum("oyx,uvyx->ouv", g, valid, optimize=False)
        gv = np.einsum("ocuv,ouv->c", kernels.data, g_taps, optimize=False) if v.requires_grad else None
        gk = np.einsum("ouv,c->ocuv", g_taps, v.data, optimize=False) if kernels.requires_grad else None
        return gv, gk

    return record_op(out, (v, kernels), vjp)


def concat_vector(parts: Sequence[Tensor], extras: Sequence[float] = ()) -> Tensor:
    """Concatenate 1-d tensors, then append fixed (non-differentiable) scalars."""
    if not parts:
        raise ShapeError("concat_vector needs at least one part")
    for p in parts:
        if p.ndim != 1:
            raise ShapeError(f"concat_vector expects vectors, got {p.shape}")
    tail = np.asarray(list(extras), dtype=np.float32)
    chunks = [p.data for p in parts]
    if tail.size:
        chunks.append(tail)
    out = Tensor(np.concatenate(chunks))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g: Array):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record_op(out, tuple(parts), vjp)


def vector_slice(v: Tensor, start: int, stop: int) -> Tensor:
    if v.ndim != 1 or not (0 <= start < stop <= v.shape[0]):
        raise ShapeError(f"slice [{start}:{stop}) invalid for vector of shape {v.shape}")
    out = Tensor(v.data[start:stop].copy())

    def vjp(g: Array):
        gv = np.zeros_like(v.data)
        gv[start:stop] = g
        return (gv,)

    return record_op(out, (v,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape).copy())

    def vjp(g: Array):
        return (g.reshape(x.shape),)

    return record_op(out, (x,), vjp)


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h-by-w window of a [C,H,W] map."""
    if x.ndim != 3 or h > x.shape[1] or w > x.shape[2] or h < 1 or w < 1:
        raise ShapeError(f"cannot crop {x.shape} to {h}x{w}")
    out = Tensor(x.data[:, :h, :w].copy())

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[:, :h, :w] = g
        return (gx,)

    return record_op(out, (x,), vjp)


def slice_in_channels(kernels: Tensor, start: int, stop: int) -> Tensor:
    """View [O,C,kh,kw] kernels restricted to input channels [start, stop)."""
    if kernels.ndim != 4:
        raise ShapeError(f"slice_in_channels expects [O,C,kh,kw], got {kernels.shape}")
    c = kernels.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice [{start}:{stop}) out of range for {c} input channels")
    out = Tensor(np.ascontiguousarray(kernels.data[:, start:stop]))

    def vjp(g: Array):
        gk = np.zeros_like(kernels.data)
        gk[:, start:stop] = g
        return (gk,)

    return record_op(out, (kernels,), vjp)


def prototype_logits(features: Tensor, z_pos: Tensor, z_neg: Tensor, tau: float = 1.0) -> Tensor:
    """Per-cell logits -||f_i - proto_k||^2 / tau; channel 1 positive, 0 negative."""
    if features.ndim != 3 or z_pos.ndim != 1 or z_neg.ndim != 1:
        raise ShapeError(f"prototype_logits expects [C,h,w], [C], [C]; got {features.shape}, {z_pos.shape}, {z_neg.shape}")
    c = features.shape[0]
    if z_pos.shape[0] != c or z_neg.shape[0] != c:
        raise ShapeError("prototype channel width differs from features")
    if tau <= 0:
        raise ShapeError(f"temperature must be positive, got {tau}")
    inv_tau = _f32(1.0 / tau)
    dp = features.data - z_pos.data[:, None, None]
    dn = features.data - z_neg.data[:, None, None]
    l_pos = -np.einsum("chw,chw->hw", dp, dp, optimize=False) * inv_tau
    l_neg = -np.einsum("chw,chw->hw", dn, dn, optimize=False) * inv_tau
    out = Tensor(np.stack([l_neg, l_pos], axis=0))

    def vjp(g: Array):
        g_neg, g_pos = g[0], g[1]
        two_inv = _f32(2.0) * inv_tau
        gf = -two_inv * (dp * g_pos[None] + dn * g_neg[None])
        gzp = two_inv * np.einsum("chw,hw->c", dp, g_pos, optimize=False) if z_pos.requires_grad else None
        gzn = two_inv * np.einsum("chw,hw->c", dn, g_neg, optimize=False) if z_neg.requires_grad else None
        return gf, gzp, gzn

    return record_op(out, (features, z_pos, z_neg), vjp)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean pixelwise cross entropy over non-IGNORE labels.

    `target` is an [H,W] integer map with values in {0..K-1} or
    IGNORE_LABEL; IGNORE pixels contribute neither loss nor gradient. All
    pixels IGNORE gives loss 0.
    """
    if logits.ndim != 3:
        raise ShapeError(f"softmax_cross_entropy expects [K,H,W] logits, got {logits.shape}")
    k = logits.shape[0]
    if k < 2:
        raise ShapeError(f"need at least 2 classes, got {k}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = np.rint(t).astype(np.int64)
    if t.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    bad = (t != IGNORE_LABEL) & ((t < 0) | (t >= k))
    if bad.any():
        raise LabelError(f"labels must be in 0..{k - 1} or {IGNORE_LABEL}, found {int(t[bad][0])}")

    valid = t != IGNORE_LABEL
    n = int(valid.sum())
    if n == 0:
        out = Tensor(np.zeros((), dtype=np.float32))

        def vjp_empty(g: Array):
            return (np.zeros_like(logits.data),)

        return record_op(out, (logits,), vjp_empty)

    m = logits.data.max(axis=0)
    e = np.exp(logits.data - m[None])
    z = e.sum(axis=0, dtype=np.float32)
    log_z = m + np.log(z)
    t_safe = np.where(valid, t, 0)
    picked = np.take_along_axis(logits.data, t_safe[None], axis=0)[0]
    per_px = np.where(valid, log_z - picked, _f32(0.0))
    out = Tensor(np.asarray(per_px.sum(dtype=np.float32) / _f32(n), dtype=np.float32))

    def vjp(g: Array):
        scale = _f32(float(g) / n)
        grad = e / z[None]
        one_hot_rows = np.arange(k)[:, None, None] == t_safe[None]
        grad = (grad - one_hot_rows.astype(np.float32)) * scale
        grad *= valid[None]
        return (grad.astype(np.float32),)

    return record_op(out, (logits,), vjp)
