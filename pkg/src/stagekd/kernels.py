"""Jitted inner loops for convolution and pooling.

All kernels are single-threaded and run with fastmath disabled so results
are bitwise reproducible run to run. Layout inside the conv path is NHWC;
the tensor layer transposes at the boundary.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col_nhwc(x, kh, kw, stride, pad):
    """Gather conv windows of an NHWC batch into rows of (kh*kw*C) values.

    Padding is implicit: out-of-bounds taps contribute zeros. Returns an
    array of shape (B*Ho*Wo, kh*kw*C) with row order (b, ho, wo) and column
    order (ki, kj, c).
    """
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.zeros((B * Ho * Wo, kh * kw * C), dtype=x.dtype)
    r = 0
    for b in range(B):
        for ho in range(Ho):
            hi0 = ho * stride - pad
            for wo in range(Wo):
                wi0 = wo * stride - pad
                c0 = 0
                for ki in range(kh):
                    hi = hi0 + ki
                    if hi < 0 or hi >= H:
                        c0 += kw * C
                        continue
                    for kj in range(kw):
                        wi = wi0 + kj
                        if wi < 0 or wi >= W:
                            c0 += C
                            continue
                        for c in range(C):
                            cols[r, c0] = x[b, hi, wi, c]
                            c0 += 1
                r += 1
    return cols


@njit(cache=True)
def col2im_nhwc(dcols, B, H, W, C, kh, kw, stride, pad):
    """Scatter-add column gradients back to an NHWC input gradient."""
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    dx = np.zeros((B, H, W, C), dtype=dcols.dtype)
    r = 0
    for b in range(B):
        for ho in range(Ho):
            hi0 = ho * stride - pad
            for wo in range(Wo):
                wi0 = wo * stride - pad
                c0 = 0
                for ki in range(kh):
                    hi = hi0 + ki
                    if hi < 0 or hi >= H:
                        c0 += kw * C
                        continue
                    for kj in range(kw):
                        wi = wi0 + kj
                        if wi < 0 or wi >= W:
                            c0 += C
                            continue
                        for c in range(C):
                            dx[b, hi, wi, c] += dcols[r, c0]
                            c0 += 1
                r += 1
    return dx


@njit(cache=True)
def maxpool2d_forward(x, kernel, stride):
    """Max over non-padded kernel windows of an NCHW batch.

    Ties resolve to the lowest flat index inside the window. Returns the
    pooled output and the flat (hi*W + wi) index of each selected element,
    which the backward pass scatters into.
    """
    B, C, H, W = x.shape
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    out = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    idx = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for ho in range(Ho):
                hi0 = ho * stride
                for wo in range(Wo):
                    wi0 = wo * stride
                    best = x[b, c, hi0, wi0]
                    besti = hi0 * W + wi0
                    for ki in range(kernel):
                        for kj in range(kernel):
                            v = x[b, c, hi0 + ki, wi0 + kj]
                            if v > best:
                                best = v
                                besti = (hi0 + ki) * W + (wi0 + kj)
                    out[b, c, ho, wo] = best
                    idx[b, c, ho, wo] = besti
    return out, idx


@njit(cache=True)
def maxpool2d_backward(dout, idx, H, W):
    """Route pooled gradients back to the argmax positions."""
    B, C, Ho, Wo = dout.shape
    dx = np.zeros((B, C, H, W), dtype=dout.dtype)
    for b in range(B):
        for c in range(C):
            for ho in range(Ho):
                for wo in range(Wo):
                    f = idx[b, c, ho, wo]
                    dx[b, c, f // W, f % W] += dout[b, c, ho, wo]
    return dx
