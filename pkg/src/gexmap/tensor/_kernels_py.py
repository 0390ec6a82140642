"""Pure-numpy versions of the compiled convolution loops.

Arrays are channel-first and already zero padded. Accumulation order follows
the compiled module, so forward results match it bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, ho, wo):
    C = xp.shape[0]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (C, ho, wo, k, k) -> (C, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, ho * wo)


def col2im(cols, C, hp, wp, k, stride, ho, wo):
    out = np.zeros((C, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(C, k, k, ho, wo)
    for a in range(k):
        for b in range(k):
            out[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += blocks[:, a, b]
    return out


def dw_forward(xp, w, ho, wo):
    C, k = w.shape[0], w.shape[1]
    out = np.zeros((C, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            out += w[:, a, b, None, None] * xp[:, a : a + ho, b : b + wo]
    return out


def dw_backward(xp, w, g):
    C, k = w.shape[0], w.shape[1]
    ho, wo = g.shape[1], g.shape[2]
    gx = np.zeros_like(xp)
    gw = np.empty_like(w)
    gflat = g.reshape(C, -1)
    for a in range(k):
        for b in range(k):
            gx[:, a : a + ho, b : b + wo] += w[:, a, b, None, None] * g
            win = xp[:, a : a + ho, b : b + wo].reshape(C, -1)
            gw[:, a, b] = np.einsum("ci,ci->c", gflat, win)
    return gx, gw
