"""Equilibrium-propagation learning: losses, phase running, weight updates.

One training step relaxes the network three times from the same example:
free (no nudge), nudged toward the target with +beta, and with -beta.  The
weight update is the contrast between the two nudged equilibria, scaled by
1/(2 beta); it is local (each connection sees only its two endpoint
signals) yet follows the loss gradient.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from epconv import kernels
from epconv.config import DynamicsConfig, EPConfig, NetGeometry, SpikingConfig
from epconv.data import batches
from epconv.dynamics import (
    NeuronState,
    Parameters,
    PhaseSnapshot,
    hard_sigmoid,
    relax,
)
from epconv.layers import flatten

__all__ = [
    "GradientSet",
    "mse_loss",
    "ce_loss",
    "softmax",
    "onehot",
    "make_nudge",
    "ep_gradients",
    "sgd_update",
    "train_batch",
    "evaluate",
    "fit",
]


# ---- losses and targets ----


def onehot(labels, n_classes, dtype=np.float64):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mse_loss(output, target):
    """Half mean squared error over every element."""
    output = np.asarray(output, dtype=np.float64)
    return 0.5 * float(np.mean((output - target) ** 2))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss(logits, target):
    """Cross entropy of softmax(logits) against one-hot targets, batch mean."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -float(np.mean((target * logp).sum(axis=-1)))


def phase_loss(output_state, target, loss):
    """The loss whose gradient the nudge injects: per-sample sum over
    classes, averaged over the batch (distinct from the reporting metric
    ``mse_loss``, which averages over elements)."""
    if loss == "mse":
        sig = hard_sigmoid(output_state)
        return 0.5 * float(np.mean(((sig - target) ** 2).sum(axis=-1)))
    return ce_loss(output_state, target)


def make_nudge(target, beta, loss):
    """Force on the output layer: -beta * dL/d(output signal), evaluated
    on the current analog output state each step."""
    if loss == "mse":
        def nudge(xi_out):
            return beta * (target - hard_sigmoid(xi_out))
    else:
        def nudge(xi_out):
            return beta * (target - softmax(xi_out))
    return nudge


# ---- the contrastive update ----


@dataclass
class GradientSet:
    """Per-layer weight/bias update directions (positive = descent)."""

    weights: list
    biases: list

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet([w * c for w in self.weights], [b * c for b in self.biases])


def _phase_terms(snap: PhaseSnapshot, geo: NetGeometry):
    """Signals and unpooled states a phase contributes to the update."""
    sigs = [snap.input] + [hard_sigmoid(z) for z in snap.xi]
    ups = []
    for k, g in enumerate(geo.layers):
        if g.spec.kind == "linear":
            ups.append(None)
            continue
        p = g.spec.pooling
        if p is None:
            ups.append(sigs[k + 1])
        elif p.kind == "max":
            ups.append(kernels.maxunpool(sigs[k + 1], snap.pool_idx[k], p.size))
        else:
            ups.append(kernels.avgunpool(sigs[k + 1], p.size, p.resolved_alpha))
    return sigs, ups


def ep_gradients(pos: PhaseSnapshot, neg: PhaseSnapshot, geo: NetGeometry,
                 beta: float) -> GradientSet:
    """Contrast the two nudged equilibria into an update direction.

    Conv layers correlate the unpooled upper signal with the lower signal
    (the weight-gradient adjoint of the forward route); linear layers take
    the plain outer product.  Everything is averaged over the batch and
    scaled by 1/(2 beta).
    """
    sig_p, up_p = _phase_terms(pos, geo)
    sig_n, up_n = _phase_terms(neg, geo)
    batch = pos.input.shape[0]
    scale = 1.0 / (2.0 * beta * batch)
    dws, dbs = [], []
    for k, g in enumerate(geo.layers):
        if g.spec.kind == "conv":
            sp = g.spec
            wg_p = kernels.conv2d_wgrad(sig_p[k], up_p[k], sp.stride, sp.padding, sp.kernel)
            wg_n = kernels.conv2d_wgrad(sig_n[k], up_n[k], sp.stride, sp.padding, sp.kernel)
            dws.append((wg_p - wg_n) * scale)
            # bias acts on the pooled state, so it contrasts state sums
            dbs.append(
                (sig_p[k + 1].sum(axis=(0, 2, 3)) - sig_n[k + 1].sum(axis=(0, 2, 3))) * scale
            )
        else:
            lo_p = sig_p[k] if sig_p[k].ndim == 2 else flatten(sig_p[k])
            lo_n = sig_n[k] if sig_n[k].ndim == 2 else flatten(sig_n[k])
            dws.append((sig_p[k + 1].T @ lo_p - sig_n[k + 1].T @ lo_n) * scale)
            dbs.append((sig_p[k + 1].sum(axis=0) - sig_n[k + 1].sum(axis=0)) * scale)
    return GradientSet(dws, dbs)


def sgd_update(params: Parameters, grads: GradientSet, rates) -> Parameters:
    """Plain SGD, in place: w += rate * direction, one rate per layer."""
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        w += np.asarray(rates[k] * grads.weights[k], dtype=w.dtype)
        b += np.asarray(rates[k] * grads.biases[k], dtype=b.dtype)
    return params


# ---- one batch, three phases ----


def train_batch(params: Parameters, x, target, geo: NetGeometry, dcfg: DynamicsConfig,
                ecfg: EPConfig, scfg: SpikingConfig | None = None, mode: str = "crnn",
                acct=None):
    """Run the three phases on one batch.  Returns (GradientSet, metrics).

    Metrics (loss, error count) come from the free phase, so reported
    training numbers are untouched by the nudges.
    """
    dtype = params.weights[0].dtype
    state = NeuronState.zeros(geo, x.shape[0], dtype)
    if acct is not None:
        acct.note("state", state.nbytes)
    free = relax(state, params, geo, dcfg, x, mode=mode, scfg=scfg)
    if acct is not None:
        acct.note("snapshot_free", free.nbytes)

    out = free.xi[-1]
    loss = phase_loss(out, target, ecfg.loss)
    errors = int((out.argmax(axis=1) != target.argmax(axis=1)).sum())

    neg_start = state.copy()
    if acct is not None:
        acct.note("state_neg", neg_start.nbytes)
    pos = relax(state, params, geo, dcfg, x, mode=mode, scfg=scfg,
                nudge_fn=make_nudge(target, ecfg.beta, ecfg.loss))
    neg = relax(neg_start, params, geo, dcfg, x, mode=mode, scfg=scfg,
                nudge_fn=make_nudge(target, -ecfg.beta, ecfg.loss))
    if acct is not None:
        acct.note("snapshot_pos", pos.nbytes)
        acct.note("snapshot_neg", neg.nbytes)

    grads = ep_gradients(pos, neg, geo, ecfg.beta)
    if acct is not None:
        for name in ("state", "snapshot_free", "state_neg", "snapshot_pos", "snapshot_neg"):
            acct.release(name)
    return grads, {"loss": loss, "errors": errors, "count": x.shape[0]}


# ---- evaluation and the epoch loop ----


def evaluate(params: Parameters, images, labels, geo: NetGeometry, dcfg: DynamicsConfig,
             ecfg: EPConfig, scfg: SpikingConfig | None = None, mode: str = "crnn",
             batch_size: int | None = None):
    """Free-phase classification over a dataset.  Returns (error_rate, loss)."""
    bs = batch_size or ecfg.batch_size
    dtype = params.weights[0].dtype
    n = len(images)
    errors = 0
    loss_sum = 0.0
    for lo in range(0, n, bs):
        x = np.asarray(images[lo : lo + bs], dtype=dtype)
        y = onehot(labels[lo : lo + bs], geo.output_size)
        state = NeuronState.zeros(geo, x.shape[0], dtype)
        relax(state, params, geo, dcfg, x, mode=mode, scfg=scfg, snapshot=False)
        out = state.xi[-1]
        errors += int((out.argmax(axis=1) != labels[lo : lo + bs]).sum())
        loss_sum += phase_loss(out, y, ecfg.loss) * x.shape[0]
    return errors / n, loss_sum / n


def fit(params: Parameters, geo: NetGeometry, dcfg: DynamicsConfig, ecfg: EPConfig,
        train_images, train_labels, test_images, test_labels,
        scfg: SpikingConfig | None = None, mode: str = "crnn",
        out_dir: str | Path | None = None, log=None, seed_stream=None,
        eval_batch: int | None = None):
    """Epoch loop with per-epoch evaluation and CSV logging.

    Writes ``metrics.csv`` (deterministic given the seed) and ``timing.csv``
    (wall clock, separate file so reruns diff clean) under ``out_dir``.
    Returns the history as a list of dicts.
    """
    from epconv.diagnostics import MemoryAccountant
    from epconv.seeding import substream

    n = len(train_images)
    dtype = params.weights[0].dtype
    rates = [ecfg.rate_for(k, geo.n_layers) for k in range(geo.n_layers)]
    history = []
    acct = MemoryAccountant()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(ecfg.epochs):
        t0 = time.perf_counter()
        epoch_rng = (seed_stream or substream)(ecfg.seed, "shuffle", epoch)
        train_loss = 0.0
        train_errors = 0
        seen = 0
        for xb, yb in batches(train_images, train_labels, ecfg.batch_size, seed=epoch_rng):
            x = np.asarray(xb, dtype=dtype)
            y = onehot(yb, geo.output_size)
            grads, m = train_batch(params, x, y, geo, dcfg, ecfg, scfg, mode, acct=acct)
            sgd_update(params, grads, rates)
            train_loss += m["loss"] * m["count"]
            train_errors += m["errors"]
            seen += m["count"]
        test_error, test_loss = evaluate(
            params, test_images, test_labels, geo, dcfg, ecfg, scfg, mode,
            batch_size=eval_batch,
        )
        row = {
            "epoch": epoch,
            "train_loss": train_loss / max(seen, 1),
            "train_error": train_errors / max(seen, 1),
            "test_loss": test_loss,
            "test_error": test_error,
            "peak_bytes": acct.peak,
        }
        history.append(row)
        elapsed = time.perf_counter() - t0
        if log is not None:
            log(f"epoch {epoch}: train_error {row['train_error']:.4f} "
                f"test_error {test_error:.4f} ({elapsed:.1f}s)")
        if out_dir is not None:
            _append_csv(out_dir / "metrics.csv", row)
            _append_csv(out_dir / "timing.csv", {"epoch": epoch, "seconds": f"{elapsed:.3f}"})
            from epconv.checkpoint import save_checkpoint

            save_checkpoint(out_dir / "checkpoint.bin", params, epoch=epoch, seed=ecfg.seed)
    return history


def _append_csv(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)
