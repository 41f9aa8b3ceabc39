"""Numba-compiled kernels.

Same contract as ``numpy_backend``; the im2col/col2im layout transforms and
the fused elementwise updates run as compiled loops, while the inner
contraction still hits BLAS through ``np.dot``.  Compilation is lazy and
cached on disk, so the first call in a fresh environment pays a one-time
cost.

Results may differ from the numpy backend in the last few ulps (different
summation order inside the layout loops); each backend on its own is
bitwise deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


# ---- convolution ----


@njit(cache=True)
def _im2col(xp, k, stride, ho, wo, col):
    b, ci = xp.shape[0], xp.shape[1]
    for bi in range(b):
        for c in range(ci):
            for kh in range(k):
                for kw in range(k):
                    r = (c * k + kh) * k + kw
                    for oh in range(ho):
                        ih = oh * stride + kh
                        for ow in range(wo):
                            col[bi, r, oh * wo + ow] = xp[bi, c, ih, ow * stride + kw]


@njit(cache=True)
def _pad(x, padding):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


@njit(cache=True)
def _conv2d(x, w2, k, stride, padding, co):
    b, ci, h, wd = x.shape
    xp = _pad(x, padding) if padding > 0 else x
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    col = np.empty((b, ci * k * k, ho * wo), dtype=x.dtype)
    _im2col(xp, k, stride, ho, wo, col)
    y = np.empty((b, co, ho, wo), dtype=x.dtype)
    for bi in range(b):
        y[bi] = np.dot(w2, col[bi]).reshape(co, ho, wo)
    return y


@njit(cache=True)
def _conv2d_transpose(g, w2t, k, stride, padding, ci, h, wd):
    b, co, ho, wo = g.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    xp = np.zeros((b, ci, hp, wp), dtype=g.dtype)
    for bi in range(b):
        dcol = np.dot(w2t, g[bi].reshape(co, ho * wo))
        for c in range(ci):
            for kh in range(k):
                for kw in range(k):
                    r = (c * k + kh) * k + kw
                    for oh in range(ho):
                        ih = oh * stride + kh
                        for ow in range(wo):
                            xp[bi, c, ih, ow * stride + kw] += dcol[r, oh * wo + ow]
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + wd].copy()


@njit(cache=True)
def _conv2d_wgrad(x, g, k, stride, padding):
    b, ci = x.shape[0], x.shape[1]
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    xp = _pad(x, padding) if padding > 0 else x
    col = np.empty((b, ci * k * k, ho * wo), dtype=x.dtype)
    _im2col(xp, k, stride, ho, wo, col)
    wg = np.zeros((co, ci * k * k), dtype=x.dtype)
    for bi in range(b):
        wg += np.dot(g[bi].reshape(co, ho * wo), col[bi].T)
    return wg


def conv2d(x, w, stride=1, padding=0):
    co, ci, k, _ = w.shape
    w2 = np.ascontiguousarray(w.reshape(co, ci * k * k))
    return _conv2d(np.ascontiguousarray(x), w2, k, stride, padding, co)


def conv2d_transpose(g, w, stride, padding, out_hw):
    co, ci, k, _ = w.shape
    w2t = np.ascontiguousarray(w.reshape(co, ci * k * k).T)
    return _conv2d_transpose(
        np.ascontiguousarray(g), w2t, k, stride, padding, ci, out_hw[0], out_hw[1]
    )


def conv2d_wgrad(x, g, stride, padding, kernel):
    ci = x.shape[1]
    co = g.shape[1]
    wg = _conv2d_wgrad(np.ascontiguousarray(x), np.ascontiguousarray(g), kernel, stride, padding)
    return wg.reshape(co, ci, kernel, kernel)


# ---- pooling ----


@njit(cache=True)
def _maxpool(x, f):
    b, c, h, w = x.shape
    ho, wo = h // f, w // f
    y = np.empty((b, c, ho, wo), dtype=x.dtype)
    idx = np.empty((b, c, ho, wo), dtype=np.int8)
    for bi in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    best = x[bi, ci, oh * f, ow * f]
                    bestk = 0
                    for p in range(f):
                        for q in range(f):
                            v = x[bi, ci, oh * f + p, ow * f + q]
                            if v > best:  # strict: first max wins ties
                                best = v
                                bestk = p * f + q
                    y[bi, ci, oh, ow] = best
                    idx[bi, ci, oh, ow] = bestk
    return y, idx


@njit(cache=True)
def _maxunpool(y, idx, f):
    b, c, ho, wo = y.shape
    x = np.zeros((b, c, ho * f, wo * f), dtype=y.dtype)
    for bi in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    k = idx[bi, ci, oh, ow]
                    x[bi, ci, oh * f + k // f, ow * f + k % f] = y[bi, ci, oh, ow]
    return x


@njit(cache=True)
def _avgpool(x, f):
    b, c, h, w = x.shape
    ho, wo = h // f, w // f
    y = np.zeros((b, c, ho, wo), dtype=x.dtype)
    inv = 1.0 / (f * f)
    for bi in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for p in range(f):
                        for q in range(f):
                            acc += x[bi, ci, oh * f + p, ow * f + q]
                    y[bi, ci, oh, ow] = acc * inv
    return y


@njit(cache=True)
def _avgunpool(y, f, alpha):
    b, c, ho, wo = y.shape
    x = np.empty((b, c, ho * f, wo * f), dtype=y.dtype)
    for bi in range(b):
        for ci in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    v = y[bi, ci, oh, ow] / alpha
                    for p in range(f):
                        for q in range(f):
                            x[bi, ci, oh * f + p, ow * f + q] = v
    return x


def maxpool(x, f):
    return _maxpool(np.ascontiguousarray(x), f)


def maxunpool(y, idx, f):
    return _maxunpool(np.ascontiguousarray(y), idx, f)


def avgpool(x, f):
    return _avgpool(np.ascontiguousarray(x), f)


def avgunpool(y, f, alpha):
    return _avgunpool(np.ascontiguousarray(y), f, alpha)


# ---- activation (elementwise, delegated; fused kernels inline these) ----

from epconv.kernels.numpy_backend import hard_sigmoid, hard_sigmoid_deriv  # noqa: E402


# ---- fused state updates ----


@njit(cache=True)
def _crnn_update(xi, drive, step_size):
    n = xi.size
    x = xi.reshape(n)
    dr = drive.reshape(n)
    for i in range(n):
        x0 = x[i]
        g = 1.0 if (x0 >= 0.0) and (x0 <= 1.0) else 0.0
        pre = (1.0 - step_size) * x0 + step_size * g * dr[i]
        x[i] = 0.0 if pre < 0.0 else (1.0 if pre > 1.0 else pre)


@njit(cache=True)
def _snn_update(xi, rho_prev, v, d, s, phi, step_size, decay, threshold):
    n = xi.size
    x = xi.reshape(n)
    rp = rho_prev.reshape(n)
    vv = v.reshape(n)
    dd = d.reshape(n)
    ss = s.reshape(n)
    ph = phi.reshape(n)
    for i in range(n):
        dv = (1.0 - decay) * dd[i] + decay * ph[i]
        dd[i] = dv
        x0 = x[i]
        g = 1.0 if (x0 >= 0.0) and (x0 <= 1.0) else 0.0
        pre = (1.0 - step_size) * x0 + step_size * g * dv
        x1 = 0.0 if pre < 0.0 else (1.0 if pre > 1.0 else pre)
        x[i] = x1
        vi = vv[i] + (x1 - (1.0 - decay) * rp[i]) / decay
        si = 1.0 if vi > threshold else 0.0
        ss[i] = si
        vv[i] = vi - si
        rp[i] = x1


@njit(cache=True)
def _sigma_delta(v, x, threshold):
    n = v.size
    vv = v.reshape(n)
    xx = x.reshape(n)
    s = np.empty_like(v)
    ss = s.reshape(n)
    for i in range(n):
        vi = vv[i] + xx[i]
        si = 1.0 if vi > threshold else 0.0
        ss[i] = si
        vv[i] = vi - si
    return s


def crnn_update(xi, drive, step_size):
    _crnn_update(xi, np.ascontiguousarray(drive), step_size)


def snn_update(xi, rho_prev, v, d, s, phi, step_size, decay, threshold):
    _snn_update(xi, rho_prev, v, d, s, np.ascontiguousarray(phi), step_size, decay, threshold)


def sigma_delta(v, x, threshold):
    return _sigma_delta(v, np.ascontiguousarray(x), threshold)
