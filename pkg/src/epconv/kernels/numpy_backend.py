"""Pure-numpy reference kernels.

Convolutions go through im2col so the inner contraction is a single BLAS
GEMM; pooling and the fused state updates are vectorized elementwise code.
Every function here has a numba twin in ``numba_backend``; this module is
the always-available fallback and the ground truth the twin is tested
against.

All kernels preserve the dtype of their inputs.  State-update kernels
mutate their state arguments in place.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


# ---- convolution ----


def _pad(x, padding):
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(xp, kernel, stride, ho, wo):
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kernel, kernel, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    # reshape forces the copy into GEMM layout [B, C*k*k, Ho*Wo]
    return view.reshape(b, c * kernel * kernel, ho * wo)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of [B,Ci,H,W] with [Co,Ci,k,k] -> [B,Co,Ho,Wo]."""
    b = x.shape[0]
    co, ci, k, _ = w.shape
    xp = _pad(x, padding)
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    col = _im2col(xp, k, stride, ho, wo)
    y = np.matmul(w.reshape(co, ci * k * k), col)
    return y.reshape(b, co, ho, wo)


def conv2d_transpose(g, w, stride, padding, out_hw):
    """Adjoint of conv2d in its input: [B,Co,Ho,Wo] -> [B,Ci,H,W]."""
    b, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    h, wd = out_hw
    dcol = np.matmul(w.reshape(co, ci * k * k).T, g.reshape(b, co, ho * wo))
    dcol = dcol.reshape(b, ci, k, k, ho, wo)
    hp, wp = h + 2 * padding, wd + 2 * padding
    xp = np.zeros((b, ci, hp, wp), dtype=g.dtype)
    for kh in range(k):
        for kw in range(k):
            xp[:, :, kh : kh + ho * stride : stride, kw : kw + wo * stride : stride] += dcol[
                :, :, kh, kw
            ]
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + wd].copy()


def conv2d_wgrad(x, g, stride, padding, kernel):
    """Adjoint of conv2d in its weights: correlate input with upstream."""
    b, co, ho, wo = g.shape
    ci = x.shape[1]
    xp = _pad(x, padding)
    col = _im2col(xp, kernel, stride, ho, wo)
    wg = np.matmul(g.reshape(b, co, ho * wo), col.transpose(0, 2, 1)).sum(axis=0)
    return wg.reshape(co, ci, kernel, kernel)


# ---- pooling ----


def _zones(x, f):
    b, c, h, w = x.shape
    z = x.reshape(b, c, h // f, f, w // f, f).transpose(0, 1, 2, 4, 3, 5)
    return z.reshape(b, c, h // f, w // f, f * f)


def maxpool(x, f):
    """Zone-wise max.  Returns (pooled, indices); index i*f+j points at the
    winning position inside the zone, first occurrence on ties."""
    z = _zones(x, f)
    idx = z.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(z, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxunpool(y, idx, f):
    """Place each value at its recorded zone position, zero elsewhere."""
    b, c, ho, wo = y.shape
    z = np.zeros((b, c, ho, wo, f * f), dtype=y.dtype)
    np.put_along_axis(z, idx[..., None].astype(np.intp), y[..., None], axis=-1)
    z = z.reshape(b, c, ho, wo, f, f).transpose(0, 1, 2, 4, 3, 5)
    return z.reshape(b, c, ho * f, wo * f).copy()


def avgpool(x, f):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // f, f, w // f, f).mean(axis=(3, 5))


def avgunpool(y, f, alpha):
    """Nearest-neighbor upsample scaled by 1/alpha (alpha = f**2 gives the
    exact adjoint of avgpool)."""
    b, c, ho, wo = y.shape
    out = np.empty((b, c, ho, f, wo, f), dtype=y.dtype)
    out[...] = (y / y.dtype.type(alpha))[:, :, :, None, :, None]
    return out.reshape(b, c, ho * f, wo * f)


# ---- activation ----


def hard_sigmoid(u):
    return np.clip(u, 0.0, 1.0)


def hard_sigmoid_deriv(u):
    # boundary points count as interior so a zero-initialized network can
    # start moving
    return ((u >= 0.0) & (u <= 1.0)).astype(u.dtype)


# ---- fused state updates ----


def crnn_update(xi, drive, step_size):
    """One gated Euler step, in place: xi <- rho((1-e)xi + e rho'(xi) drive)."""
    pre = (1.0 - step_size) * xi + step_size * hard_sigmoid_deriv(xi) * drive
    np.clip(pre, 0.0, 1.0, out=xi)


def snn_update(xi, rho_prev, v, d, s, phi, step_size, decay, threshold):
    """One spiking-neuron step, in place on all five state arrays.

    Order: decode trace from drive, gated Euler on the state, predictive
    encode of the signal change, sigma-delta quantization of the residual.
    """
    d *= 1.0 - decay
    d += decay * phi
    pre = (1.0 - step_size) * xi + step_size * hard_sigmoid_deriv(xi) * d
    np.clip(pre, 0.0, 1.0, out=xi)
    sig = hard_sigmoid(xi)
    v += (sig - (1.0 - decay) * rho_prev) / decay
    np.copyto(s, (v > threshold).astype(s.dtype))
    v -= s
    np.copyto(rho_prev, sig)


def sigma_delta(v, x, threshold):
    """Quantize one step, in place on v.  Returns the spike array."""
    v += x
    s = (v > threshold).astype(v.dtype)
    v -= s
    return s
