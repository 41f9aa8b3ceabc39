"""Layer-level operations: forward and backward routes, drive assembly.

A layer's total input (its "drive") is the sum of a forward route from the
layer below and a backward route from the layer above, plus its bias.  For
a pooled conv layer the forward route is pool(conv(signal_below)) and the
backward route of the layer *below* it is conv_transpose(unpool(signal)),
with max unpooling steered by the indices the forward route produced in
the same sweep.  Signals are indexed with the input as entry 0, so layer
``k`` reads ``signals[k]`` from below and ``signals[k+1]`` is its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from epconv import kernels
from epconv.config import LayerGeometry, NetGeometry


def linear(x, w):
    """[B, in] x [out, in] -> [B, out]."""
    return x @ w.T


def linear_transpose(g, w):
    """Adjoint of ``linear`` in its input: [B, out] -> [B, in]."""
    return g @ w


def flatten(sig):
    """Conv state -> linear input, channel-major row-major order."""
    return sig.reshape(sig.shape[0], -1)


@dataclass
class Routes:
    """Per-layer route tensors from one drive assembly sweep."""

    forward: list  # forward route output, state-shaped
    backward: list  # backward route output or None (top layer)
    pre_pool: list  # conv output before pooling, None for linear layers
    pool_idx: list  # max-pool indices, None for avg pooling / linear


def forward_route(sig_lower, w, g: LayerGeometry):
    """Forward term for one layer.  Returns (term, pre_pool, pool_idx)."""
    spec = g.spec
    if spec.kind == "linear":
        x = sig_lower if sig_lower.ndim == 2 else flatten(sig_lower)
        return linear(x, w), None, None
    x = kernels.conv2d(sig_lower, w, spec.stride, spec.padding)
    if spec.pooling is None:
        return x, x, None
    if spec.pooling.kind == "max":
        y, idx = kernels.maxpool(x, spec.pooling.size)
        return y, x, idx
    return kernels.avgpool(x, spec.pooling.size), x, None


def backward_route(sig_upper, w_upper, g_upper: LayerGeometry, idx_upper, lower_shape):
    """Backward term for the layer below ``g_upper``.

    Undoes the upper layer's pooling on its signal, then applies the
    transposed connection.  ``idx_upper`` must come from the same sweep's
    forward route when the upper layer max-pools.
    """
    spec = g_upper.spec
    if spec.kind == "linear":
        out = linear_transpose(sig_upper, w_upper)
        if len(lower_shape) == 3:
            out = out.reshape((sig_upper.shape[0],) + tuple(lower_shape))
        return out
    u = sig_upper
    if spec.pooling is not None:
        if spec.pooling.kind == "max":
            u = kernels.maxunpool(sig_upper, idx_upper, spec.pooling.size)
        else:
            u = kernels.avgunpool(sig_upper, spec.pooling.size, spec.pooling.resolved_alpha)
    return kernels.conv2d_transpose(u, w_upper, spec.stride, spec.padding, lower_shape[1:])


def compute_drives(signals, weights, biases, geo: NetGeometry):
    """Drives for every layer in one sweep.

    ``signals`` has the input at index 0 and one entry per layer after it.
    Returns (drives, routes); drives include biases but no nudge term.
    """
    n = geo.n_layers
    fwd, pre, idx = [], [], []
    for k in range(n):
        f, p, i = forward_route(signals[k], weights[k], geo.layers[k])
        fwd.append(f)
        pre.append(p)
        idx.append(i)
    bwd = [None] * n
    drives = []
    for k in range(n):
        drive = fwd[k].copy()
        if k + 1 < n:
            bwd[k] = backward_route(
                signals[k + 2], weights[k + 1], geo.layers[k + 1], idx[k + 1],
                geo.layers[k].state_shape,
            )
            drive += bwd[k]
        g = geo.layers[k]
        if g.spec.kind == "conv":
            drive += biases[k][None, :, None, None]
        else:
            drive += biases[k][None, :]
        drives.append(drive)
    return drives, Routes(forward=fwd, backward=bwd, pre_pool=pre, pool_idx=idx)


def phi(signals, weights, biases, geo: NetGeometry, n: int):
    """Drive of layer ``n`` alone (bias included).

    Convenience form of one row of ``compute_drives``; when the layer above
    max-pools, its forward route is evaluated first to obtain the routing
    indices for the backward term.
    """
    f, _, _ = forward_route(signals[n], weights[n], geo.layers[n])
    g = geo.layers[n]
    drive = f + (
        biases[n][None, :, None, None] if g.spec.kind == "conv" else biases[n][None, :]
    )
    if n + 1 < geo.n_layers:
        gu = geo.layers[n + 1]
        idx_u = None
        if gu.spec.kind == "conv" and gu.spec.pooling is not None and gu.spec.pooling.kind == "max":
            _, _, idx_u = forward_route(signals[n + 1], weights[n + 1], gu)
        drive = drive + backward_route(
            signals[n + 2], weights[n + 1], gu, idx_u, g.state_shape
        )
    return drive
