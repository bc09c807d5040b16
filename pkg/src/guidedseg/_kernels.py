"""Numba kernels for 2-d convolution.

All accumulation is float32 with a fixed per-cell summation order (bias
first, then taps in in-channel, kernel-row, kernel-column order), so the
forward result is bit-identical to a scalar nested-loop evaluation of the
same order on any one platform. fastmath stays off: LLVM must not fuse or
reassociate the accumulation chain.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_fwd(xp, w, b, stride, out):
    co_n, ci_n, kh, kw = w.shape
    ho, wo = out.shape[1], out.shape[2]
    for co in range(co_n):
        for y in range(ho):
            for x in range(wo):
                acc = b[co]
                y0 = y * stride
                x0 = x * stride
                for ci in range(ci_n):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ci, y0 + u, x0 + v] * w[co, ci, u, v]
                out[co, y, x] = acc


@njit(cache=True)
def conv2d_bwd_input(g, w, stride, gxp):
    co_n, ci_n, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    for co in range(co_n):
        for y in range(ho):
            for x in range(wo):
                gv = g[co, y, x]
                y0 = y * stride
                x0 = x * stride
                for ci in range(ci_n):
                    for u in range(kh):
                        for v in range(kw):
                            gxp[ci, y0 + u, x0 + v] += gv * w[co, ci, u, v]


@njit(cache=True)
def conv2d_bwd_weight(g, xp, stride, gw):
    co_n, ci_n, kh, kw = gw.shape
    ho, wo = g.shape[1], g.shape[2]
    for co in range(co_n):
        for ci in range(ci_n):
            for u in range(kh):
                for v in range(kw):
                    acc = np.float32(0.0)
                    for y in range(ho):
                        for x in range(wo):
                            acc += g[co, y, x] * xp[ci, y * stride + u, x * stride + v]
                    gw[co, ci, u, v] = acc


def warmup() -> None:
    """Compile the kernels on tiny inputs (cached across processes)."""
    xp = np.zeros((1, 3, 3), dtype=np.float32)
    w = np.zeros((1, 1, 2, 2), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    out = np.zeros((1, 2, 2), dtype=np.float32)
    conv2d_fwd(xp, w, b, 1, out)
    conv2d_bwd_input(out, w, 1, np.zeros_like(xp))
    conv2d_bwd_weight(out, xp, 1, np.zeros_like(w))
