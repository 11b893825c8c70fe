"""Compiled inner loops for depthwise convolution and 3x3 pooling.

Inputs are already padded.  Every kernel is a plain loop nest so the
forward and backward of each op visit elements in the same order.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(xp, w, stride, dil, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                row = out[b, ch, i]
                for ky in range(k):
                    src = xp[b, ch, i * stride + ky * dil]
                    for kx in range(k):
                        wv = w[ch, ky, kx]
                        off = kx * dil
                        if stride == 1:
                            for j in range(wo):
                                row[j] += wv * src[off + j]
                        else:
                            for j in range(wo):
                                row[j] += wv * src[off + j * stride]
    return out


@numba.njit(cache=True)
def dw_backward(xp, w, g, stride, dil, need_x, need_w):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                grow = g[b, ch, i]
                for ky in range(k):
                    r = i * stride + ky * dil
                    src = xp[b, ch, r]
                    dst = gxp[b, ch, r]
                    for kx in range(k):
                        off = kx * dil
                        if need_w:
                            acc = 0.0
                            for j in range(wo):
                                acc += grow[j] * src[off + j * stride]
                            gw[ch, ky, kx] += acc
                        if need_x:
                            wv = w[ch, ky, kx]
                            for j in range(wo):
                                dst[off + j * stride] += wv * grow[j]
    return gxp, gw.astype(w.dtype)


@numba.njit(cache=True)
def max_forward(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int32)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    where = 0
                    for ky in range(k):
                        for kx in range(k):
                            v = xp[b, ch, i * stride + ky, j * stride + kx]
                            if v > best:
                                best = v
                                where = ky * k + kx
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = where
    return out, arg


@numba.njit(cache=True)
def max_backward(g, arg, k, stride, hp, wp):
    n, c, ho, wo = g.shape
    gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = arg[b, ch, i, j]
                    gxp[b, ch, i * stride + a // k, j * stride + a % k] += g[b, ch, i, j]
    return gxp


@numba.njit(cache=True)
def window_sum(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for ky in range(k):
                    src = xp[b, ch, i * stride + ky]
                    for kx in range(k):
                        for j in range(wo):
                            out[b, ch, i, j] += src[j * stride + kx]
    return out


@numba.njit(cache=True)
def window_scatter(g, k, stride, hp, wp):
    n, c, ho, wo = g.shape
    gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for ky in range(k):
                    dst = gxp[b, ch, i * stride + ky]
                    for kx in range(k):
                        for j in range(wo):
                            dst[j * stride + kx] += g[b, ch, i, j]
    return gxp
