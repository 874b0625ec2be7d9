"""Loop kernels for the parts of the CNN that are not matrix products.

Layout is NHWC throughout. Convolutions use "same" zero padding with an odd
kernel; column matrices are ordered (kh, kw, c).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def col2im(cols, n, h, w, c, k):
    """Adjoint of im2col: scatter-add column entries back onto the image."""
    p = k // 2
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for di in range(k):
                    for dj in range(k):
                        base = (di * k + dj) * c
                        for ch in range(c):
                            out[b, i + di, j + dj, ch] += cols[row, base + ch]
    return out[:, p:p + h, p:p + w, :].copy()


@njit(cache=True)
def maxpool2(y):
    """2x2/2 max pool. Ties go to the first maximum in row-major window order."""
    n, h, w, c = y.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, ho, wo, c), dtype=y.dtype)
    idx = np.empty((n, ho, wo, c), dtype=np.uint8)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = y[b, 2 * i, 2 * j, ch]
                    arg = 0
                    v = y[b, 2 * i, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        arg = 1
                    v = y[b, 2 * i + 1, 2 * j, ch]
                    if v > best:
                        best = v
                        arg = 2
                    v = y[b, 2 * i + 1, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        arg = 3
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = arg
    return out, idx


@njit(cache=True)
def maxpool2_backward(dout, idx):
    n, ho, wo, c = dout.shape
    dy = np.zeros((n, 2 * ho, 2 * wo, c), dtype=dout.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    a = idx[b, i, j, ch]
                    dy[b, 2 * i + a // 2, 2 * j + a % 2, ch] = dout[b, i, j, ch]
    return dy


@njit(cache=True)
def adam_step(w, g, m, v, lr_t, b1, b2, eps_t):
    """Fused Adam update; m and v are updated in place, new weights returned."""
    out = np.empty_like(w)
    fw = w.reshape(-1)
    fg = g.reshape(-1)
    fm = m.reshape(-1)
    fv = v.reshape(-1)
    fo = out.reshape(-1)
    c1 = 1.0 - b1
    c2 = 1.0 - b2
    for i in range(fw.shape[0]):
        gi = fg[i]
        mi = b1 * fm[i] + c1 * gi
        vi = b2 * fv[i] + c2 * gi * gi
        fm[i] = mi
        fv[i] = vi
        fo[i] = fw[i] - lr_t * mi / (np.sqrt(vi) + eps_t)
    return out
