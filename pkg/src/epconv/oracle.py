"""Unrolled-gradient oracle: BPTT and finite differences.

The contrastive rule in ``training`` claims to follow the loss gradient of
the free relaxation.  This module computes that gradient two other ways so
the claim can be checked: reverse-mode differentiation through the
explicitly unrolled dynamics (a hand-written tape, no autograd framework),
and central finite differences of the loss.  All three routes share only
the primitive tensor ops; each derivative path is independent.

Both entry points return update *directions* (negative loss gradients) so
results compare one-to-one with ``ep_gradients``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from epconv import kernels
from epconv.config import DynamicsConfig, NetGeometry, SpikingConfig
from epconv.dynamics import Parameters, hard_sigmoid, hard_sigmoid_deriv
from epconv.layers import compute_drives, flatten
from epconv.training import GradientSet, phase_loss, softmax

__all__ = [
    "UnrollTape",
    "bptt_gradients",
    "finite_diff_gradients",
    "compare_gradients",
    "kink_margin",
    "run_loss",
]


SURROGATE_WIDTH = 0.5  # spike derivative window: |v - threshold| <= width


@dataclass
class UnrollTape:
    """Per-step records the reverse pass consumes.  Grows linearly with T;
    its byte count is what the memory ledger charges BPTT for."""

    xi: list = field(default_factory=list)  # states, one entry per step (incl t=0)
    mask: list = field(default_factory=list)  # clip masks of the state update
    pool_idx: list = field(default_factory=list)  # per-step max-pool routing
    spikes: list = field(default_factory=list)  # snn: hidden spikes per step
    input_spikes: list = field(default_factory=list)  # snn: layer-0 spikes
    window: list = field(default_factory=list)  # snn: surrogate windows

    @property
    def nbytes(self) -> int:
        total = 0
        for group in (self.xi, self.mask, self.pool_idx, self.spikes,
                      self.input_spikes, self.window):
            for entry in group:
                for a in entry if isinstance(entry, list) else [entry]:
                    if a is not None:
                        total += a.nbytes
        return total


def _loss_seed(out, target, loss):
    """dL/d(output state) for the batch-mean phase loss."""
    batch = out.shape[0]
    if loss == "mse":
        return (hard_sigmoid(out) - target) * hard_sigmoid_deriv(out) / batch
    return (softmax(out) - target) / batch


def _pool_T(g, spec, idx):
    """Adjoint of the forward route's pooling."""
    if spec.pooling is None:
        return g
    f = spec.pooling.size
    if spec.pooling.kind == "max":
        return kernels.maxunpool(g, idx, f)
    return kernels.avgunpool(g, f, float(f * f))  # adjoint of the mean


def _unpool(sig, spec, idx):
    """The backward route's unpooling as used forward."""
    if spec.pooling is None:
        return sig
    f = spec.pooling.size
    if spec.pooling.kind == "max":
        return kernels.maxunpool(sig, idx, f)
    return kernels.avgunpool(sig, f, spec.pooling.resolved_alpha)


def _unpool_T(g, spec, idx):
    """Adjoint of ``_unpool``."""
    if spec.pooling is None:
        return g
    f = spec.pooling.size
    if spec.pooling.kind == "max":
        b, c, h, w = g.shape
        z = g.reshape(b, c, h // f, f, w // f, f).transpose(0, 1, 2, 4, 3, 5)
        z = z.reshape(b, c, h // f, w // f, f * f)
        return np.take_along_axis(z, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return kernels.avgpool(g, f) * (f * f / spec.pooling.resolved_alpha)


def _assembly_adjoint(adrives, signals, weights, geo, pool_idx, aw, ab):
    """Push drive cotangents back through one step's drive assembly.

    Returns per-layer signal cotangents (input entry dropped); accumulates
    weight and bias cotangents in place.
    """
    n = geo.n_layers
    asig = [np.zeros_like(signals[k + 1]) for k in range(n)]
    for k, g in enumerate(geo.layers):
        ad = adrives[k]
        if ad is None:
            continue
        spec = g.spec
        # bias
        if spec.kind == "conv":
            ab[k] += ad.sum(axis=(0, 2, 3))
        else:
            ab[k] += ad.sum(axis=0)
        # forward route of layer k
        if spec.kind == "conv":
            ax = _pool_T(ad, spec, pool_idx[k])
            aw[k] += kernels.conv2d_wgrad(signals[k], ax, spec.stride, spec.padding, spec.kernel)
            if k > 0:
                asig[k - 1] += kernels.conv2d_transpose(
                    ax, weights[k], spec.stride, spec.padding, signals[k].shape[2:]
                )
        else:
            lower = signals[k] if signals[k].ndim == 2 else flatten(signals[k])
            aw[k] += ad.T @ lower
            if k > 0:
                alow = ad @ weights[k]
                asig[k - 1] += alow.reshape(signals[k].shape)
        # backward route into layer k from layer k+1
        if k + 1 < n:
            gu = geo.layers[k + 1].spec
            if gu.kind == "conv":
                up = _unpool(signals[k + 2], gu, pool_idx[k + 1])
                aw[k + 1] += kernels.conv2d_wgrad(ad, up, gu.stride, gu.padding, gu.kernel)
                t1 = kernels.conv2d(ad, weights[k + 1], gu.stride, gu.padding)
                asig[k + 1] += _unpool_T(t1, gu, pool_idx[k + 1])
            else:
                ad_flat = ad if ad.ndim == 2 else flatten(ad)
                aw[k + 1] += signals[k + 2].T @ ad_flat
                asig[k + 1] += ad_flat @ weights[k + 1].T
    return asig


# ---- continuous model ----


def _forward_crnn(params, geo, dcfg, x, steps, tape: UnrollTape | None, acct=None):
    eps = dcfg.step_size
    xi = [np.zeros((x.shape[0],) + g.state_shape, dtype=x.dtype) for g in geo.layers]
    if tape is not None:
        tape.xi.append([z.copy() for z in xi])
    for t in range(steps):
        signals = [x] + xi
        drives, routes = compute_drives(signals, params.weights, params.biases, geo)
        new_xi, masks = [], []
        for k in range(geo.n_layers):
            u = (1 - eps) * xi[k] + eps * hard_sigmoid_deriv(xi[k]) * drives[k]
            masks.append(((u >= 0.0) & (u <= 1.0)).astype(x.dtype))
            new_xi.append(np.clip(u, 0.0, 1.0))
        xi = new_xi
        if tape is not None:
            tape.xi.append([z.copy() for z in xi])
            tape.mask.append(masks)
            tape.pool_idx.append(list(routes.pool_idx))
            if acct is not None:
                step_bytes = sum(z.nbytes for z in xi) + sum(m.nbytes for m in masks)
                step_bytes += sum(i.nbytes for i in routes.pool_idx if i is not None)
                acct.note(f"tape_{t}", step_bytes)
    return xi


def kink_margin(params: Parameters, x, geo, dcfg, steps=None):
    """Distance of the continuous dynamics from the clip's corners.

    Returns the minimum over steps and units of the pre-clip candidate's
    distance to 0 and 1.  Finite differences are only trustworthy when
    the perturbation cannot push any unit across a corner, so FD test
    points with a margin below a few h should be discarded and redrawn.
    Zero-bias networks always report 0 (layers above the signal front
    idle exactly at the corner for the first steps, and that corner is
    sensitive to the layer's own bias), so draw nonzero random biases
    for nets meant to pass this gate.  Max pooling adds index-switch
    kinks this does not see; use average pooling where smoothness
    matters.
    """
    eps = dcfg.step_size
    steps = steps or dcfg.t_free
    x = np.clip(np.asarray(x), 0.0, 1.0)
    xi = [np.zeros((x.shape[0],) + g.state_shape, dtype=x.dtype) for g in geo.layers]
    margin = np.inf
    for _ in range(steps):
        signals = [x] + xi
        drives, _ = compute_drives(signals, params.weights, params.biases, geo)
        new_xi = []
        for k in range(geo.n_layers):
            u = (1 - eps) * xi[k] + eps * hard_sigmoid_deriv(xi[k]) * drives[k]
            # a unit sitting exactly on the corner still counts: its own
            # bias can push it either way, and FD then reads half the
            # one-sided slope
            margin = min(margin, float(np.minimum(np.abs(u), np.abs(u - 1.0)).min()))
            new_xi.append(np.clip(u, 0.0, 1.0))
        xi = new_xi
    return margin


def _bptt_crnn(params, x, target, geo, dcfg, loss, steps, acct=None):
    eps = dcfg.step_size
    tape = UnrollTape()
    xi = _forward_crnn(params, geo, dcfg, x, steps, tape, acct)
    final_loss = phase_loss(xi[-1], target, loss)

    aw = [np.zeros_like(w) for w in params.weights]
    ab = [np.zeros_like(b) for b in params.biases]
    axi = [np.zeros_like(z) for z in xi]
    axi[-1] = _loss_seed(xi[-1], target, loss)

    for t in range(steps - 1, -1, -1):
        masks = tape.mask[t]
        idx = tape.pool_idx[t]
        prev_xi = tape.xi[t]  # states at t (inputs to step t+1 in 0-based tape)
        signals = [x] + prev_xi
        au = [axi[k] * masks[k] for k in range(geo.n_layers)]
        adrives = [a * eps for a in au]
        asig = _assembly_adjoint(adrives, signals, params.weights, geo, idx, aw, ab)
        axi = [au[k] * (1 - eps) + asig[k] for k in range(geo.n_layers)]

    grads = GradientSet([-g for g in aw], [-g for g in ab])
    return grads, final_loss, tape


# ---- spiking model ----


def _forward_snn(params, geo, dcfg, scfg, x, steps, tape: UnrollTape | None, acct=None):
    eps, lam, thr = dcfg.step_size, scfg.decay, scfg.threshold
    batch = x.shape[0]
    dt = x.dtype
    xi = [np.zeros((batch,) + g.state_shape, dtype=dt) for g in geo.layers]
    d = [np.zeros_like(z) for z in xi]
    v = [np.zeros_like(z) for z in xi]
    s = [np.zeros_like(z) for z in xi]
    rho_prev = [np.zeros_like(z) for z in xi]
    in_v = np.zeros_like(x)
    in_prev = np.zeros_like(x)
    if tape is not None:
        tape.xi.append([z.copy() for z in xi])
    for t in range(steps):
        e_in = (x - (1 - lam) * in_prev) / lam
        in_v = in_v + e_in
        s0 = (in_v > thr).astype(dt)
        in_v = in_v - s0
        in_prev = x
        signals = [s0] + s
        drives, routes = compute_drives(signals, params.weights, params.biases, geo)
        masks, windows, new = [], [], []
        for k in range(geo.n_layers):
            d[k] = (1 - lam) * d[k] + lam * drives[k]
            u = (1 - eps) * xi[k] + eps * hard_sigmoid_deriv(xi[k]) * d[k]
            masks.append(((u >= 0.0) & (u <= 1.0)).astype(dt))
            xk = np.clip(u, 0.0, 1.0)
            e = (hard_sigmoid(xk) - (1 - lam) * rho_prev[k]) / lam
            vacc = v[k] + e
            sk = (vacc > thr).astype(dt)
            windows.append((np.abs(vacc - thr) <= SURROGATE_WIDTH).astype(dt))
            v[k] = vacc - sk
            rho_prev[k] = hard_sigmoid(xk)
            new.append((xk, sk))
        xi = [a for a, _ in new]
        s = [b for _, b in new]
        if tape is not None:
            tape.xi.append([z.copy() for z in xi])
            tape.mask.append(masks)
            tape.window.append(windows)
            tape.spikes.append([a.copy() for a in s])
            tape.input_spikes.append(s0)
            tape.pool_idx.append(list(routes.pool_idx))
            if acct is not None:
                step_bytes = sum(z.nbytes for z in xi) + sum(m.nbytes for m in masks)
                step_bytes += sum(w.nbytes for w in windows) + sum(a.nbytes for a in s)
                step_bytes += s0.nbytes
                step_bytes += sum(i.nbytes for i in routes.pool_idx if i is not None)
                acct.note(f"tape_{t}", step_bytes)
    return xi


def _bptt_snn(params, x, target, geo, dcfg, scfg, loss, steps, acct=None):
    eps, lam = dcfg.step_size, scfg.decay
    tape = UnrollTape()
    xi = _forward_snn(params, geo, dcfg, scfg, x, steps, tape, acct)
    final_loss = phase_loss(xi[-1], target, loss)

    aw = [np.zeros_like(w) for w in params.weights]
    ab = [np.zeros_like(b) for b in params.biases]
    axi = [np.zeros_like(z) for z in xi]
    axi[-1] = _loss_seed(xi[-1], target, loss)
    ad = [np.zeros_like(z) for z in xi]
    av = [np.zeros_like(z) for z in xi]
    as_ = [np.zeros_like(z) for z in xi]

    for t in range(steps - 1, -1, -1):
        masks, windows, idx = tape.mask[t], tape.window[t], tape.pool_idx[t]
        spikes_prev = tape.spikes[t - 1] if t > 0 else [np.zeros_like(z) for z in axi]
        signals = [tape.input_spikes[t]] + spikes_prev
        new_axi, new_ad, new_av, adrives = [], [], [], []
        for k in range(geo.n_layers):
            # spike emission and potential carry
            avacc = as_[k] * windows[k] + av[k] * (1 - windows[k])
            ae = avacc
            new_av.append(avacc.copy())  # av^{t-1} = d vacc / d v^{t-1}
            # encoder: e = (sigma(xi^t) - (1-lam) sigma(xi^{t-1})) / lam
            axi_t = axi[k] + ae / lam
            # state update
            au = axi_t * masks[k]
            ad_full = ad[k] + au * eps
            adrives.append(ad_full * lam)
            new_ad.append(ad_full * (1 - lam))
            new_axi.append(au * (1 - eps) - ae * (1 - lam) / lam)
        asig = _assembly_adjoint(adrives, signals, params.weights, geo, idx, aw, ab)
        axi, ad, av = new_axi, new_ad, new_av
        as_ = asig  # spike cotangents feed the previous step's emissions
    grads = GradientSet([-g for g in aw], [-g for g in ab])
    return grads, final_loss, tape


# ---- public entry points ----


def bptt_gradients(params: Parameters, x, target, geo: NetGeometry, dcfg: DynamicsConfig,
                   loss: str = "mse", steps: int | None = None, mode: str = "crnn",
                   scfg: SpikingConfig | None = None, acct=None, with_info: bool = False):
    """Update direction from reverse-mode differentiation of the unrolled
    free relaxation (no nudge anywhere in the graph)."""
    steps = steps or dcfg.t_free
    x = np.clip(np.asarray(x, dtype=np.result_type(params.weights[0].dtype, x.dtype)), 0.0, 1.0)
    if mode == "crnn":
        grads, loss_val, tape = _bptt_crnn(params, x, target, geo, dcfg, loss, steps, acct)
    elif mode == "snn":
        if scfg is None:
            raise ValueError("snn mode needs a SpikingConfig")
        grads, loss_val, tape = _bptt_snn(params, x, target, geo, dcfg, scfg, loss, steps, acct)
    else:
        raise ValueError(f"mode must be 'crnn' or 'snn', got {mode!r}")
    if with_info:
        return grads, {"loss": loss_val, "tape_bytes": tape.nbytes, "steps": steps}
    return grads


def run_loss(params: Parameters, x, target, geo: NetGeometry, dcfg: DynamicsConfig,
             loss: str = "mse", steps: int | None = None, mode: str = "crnn",
             scfg: SpikingConfig | None = None) -> float:
    """Loss of the free relaxation, via the oracle's own forward unroll."""
    steps = steps or dcfg.t_free
    x = np.clip(np.asarray(x, dtype=np.result_type(params.weights[0].dtype, x.dtype)), 0.0, 1.0)
    if mode == "crnn":
        xi = _forward_crnn(params, geo, dcfg, x, steps, None)
    else:
        xi = _forward_snn(params, geo, dcfg, scfg, x, steps, None)
    return phase_loss(xi[-1], target, loss)


def finite_diff_gradients(params: Parameters, x, target, geo: NetGeometry,
                          dcfg: DynamicsConfig, loss: str = "mse",
                          steps: int | None = None, mode: str = "crnn",
                          scfg: SpikingConfig | None = None, h: float = 1e-5) -> GradientSet:
    """Update direction by central differences, one parameter at a time.

    O(2 P T) forward passes; keep the nets small.  Meaningful for the
    continuous model only; spike discontinuities defeat pointwise FD.
    """
    def loss_now():
        return run_loss(params, x, target, geo, dcfg, loss, steps, mode, scfg)

    dws, dbs = [], []
    for group, out in ((params.weights, dws), (params.biases, dbs)):
        for arr in group:
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                lp = loss_now()
                flat[j] = keep - h
                lm = loss_now()
                flat[j] = keep
                gflat[j] = (lp - lm) / (2 * h)
            out.append(-g)  # descent direction
    return GradientSet(dws, dbs)


def compare_gradients(a: GradientSet, b: GradientSet) -> dict:
    """Cosine similarity and relative L2 error, per layer and overall.

    ``b`` is the reference: rel = ||a - b|| / ||b||.
    """
    def cat(gs, k=None):
        if k is None:
            parts = [w.ravel() for w in gs.weights] + [x.ravel() for x in gs.biases]
        else:
            parts = [gs.weights[k].ravel(), gs.biases[k].ravel()]
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def one(va, vb):
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 and nb == 0.0:
            return {"cosine": 1.0, "rel": 0.0}
        if na == 0.0 or nb == 0.0:
            return {"cosine": 0.0, "rel": np.inf if nb == 0.0 else 1.0}
        return {
            "cosine": float(va @ vb / (na * nb)),
            "rel": float(np.linalg.norm(va - vb) / nb),
        }

    layers = [one(cat(a, k), cat(b, k)) for k in range(len(a.weights))]
    return {"layers": layers, "overall": one(cat(a), cat(b))}
