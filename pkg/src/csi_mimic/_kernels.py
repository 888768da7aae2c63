"""Compiled inner loops for the autodiff core.

Convolutions take zero-padded inputs so every index is non-negative; numba
only vectorizes the innermost loop when it can skip wraparound handling.
"""
import numba as nb
import numpy as np


@nb.njit(fastmath=True, cache=True)
def conv_forward(xp, w, out):
    # out[n,o,h,q] += sum_{c,i,j} w[o,c,i,j] * xp[n,c,h+i,q+j]
    N, O, H, W = out.shape
    C = xp.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for h in range(H):
                            for q in range(W):
                                out[n, o, h, q] += wv * xp[n, c, h + i, q + j]


@nb.njit(fastmath=True, cache=True)
def conv_weight_grad(xp, g, dw):
    # dw[o,c,i,j] += sum_{n,h,q} g[n,o,h,q] * xp[n,c,h+i,q+j]
    N, O, H, W = g.shape
    C = xp.shape[1]
    kh = dw.shape[2]
    kw = dw.shape[3]
    part = np.zeros((O, C, kh, kw, W), dtype=dw.dtype)
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        for h in range(H):
                            for q in range(W):
                                part[o, c, i, j, q] += g[n, o, h, q] * xp[n, c, h + i, q + j]
    for o in range(O):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    s = part[o, c, i, j, 0] * 0
                    for q in range(W):
                        s += part[o, c, i, j, q]
                    dw[o, c, i, j] += s


@nb.njit(fastmath=True, cache=True)
def leaky_relu_forward(x, slope, y):
    # flat contiguous arrays
    for k in range(x.size):
        v = x[k]
        y[k] = v if v >= 0 else slope * v


@nb.njit(fastmath=True, cache=True)
def leaky_relu_backward(y, g, slope, dx):
    # sign(y) == sign(x) for slope > 0
    for k in range(y.size):
        dx[k] = g[k] if y[k] >= 0 else slope * g[k]
