"""Route-magnitude probes and byte accounting for training runs.

Two unrelated instruments live here.  The route probe watches the drive
assembly during nudged relaxation and records how large the bottom-up
and top-down contributions to each layer's drive are; pooling choices
move these magnitudes apart, and the probe quantifies by how much.  The
byte accountant tracks the logical size of live buffers so the memory
footprint of contrastive training can be compared against the unrolled
oracle's tape without touching allocator internals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from epconv.config import DynamicsConfig, EPConfig, NetworkConfig, SpikingConfig
from epconv.dynamics import NeuronState, Parameters, relax
from epconv.training import make_nudge, onehot

ROUTE_NAMES = ("forward", "backward")
QUANTITY_NAMES = ("X", "Y")


# ---- byte accounting ----


class MemoryAccountant:
    """Ledger of live buffer sizes.  Logical bytes only (count x width),
    so numbers are comparable across backends and allocators."""

    def __init__(self):
        self._live = {}
        self.current = 0
        self.peak = 0
        self.at_peak = {}

    def note(self, name, nbytes):
        """Register a buffer.  Re-noting a name replaces its old size."""
        nbytes = int(nbytes)
        if name in self._live:
            self.current -= self._live[name]
        self._live[name] = nbytes
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current
            self.at_peak = dict(self._live)

    def release(self, name):
        self.current -= self._live.pop(name)

    def reset(self):
        self._live.clear()
        self.current = 0
        self.peak = 0
        self.at_peak = {}


def memory_report(acct: MemoryAccountant) -> dict:
    """Peak retained bytes with the per-buffer breakdown at that moment."""
    return {
        "peak_bytes": acct.peak,
        "current_bytes": acct.current,
        "at_peak": dict(acct.at_peak),
    }


# ---- route statistics ----


@dataclass
class RouteStats:
    """Streaming per-(layer, step, route, quantity) magnitude statistics.

    ``X`` is a route's input signal (the layer below for the forward
    route, the layer above for the backward one) and ``Y`` its output
    term in the drive.  Magnitudes are absolute values; ``sum`` is the
    per-sample sum over non-batch axes averaged over samples, matching
    activation totals summed across spatial dimensions.
    """

    layers: tuple
    steps: int
    count: int = 0
    spatial: np.ndarray = field(default=None)  # [L, T, route, qty] summed |v|
    el_sum: np.ndarray = field(default=None)
    el_sq: np.ndarray = field(default=None)
    el_count: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (len(self.layers), self.steps, 2, 2)
        self.spatial = np.zeros(shape)
        self.el_sum = np.zeros(shape)
        self.el_sq = np.zeros(shape)
        self.el_count = np.zeros(shape, dtype=np.int64)

    def _accumulate(self, li, t, route, qty, tensor):
        a = np.abs(np.asarray(tensor, dtype=np.float64))
        self.spatial[li, t, route, qty] += a.reshape(a.shape[0], -1).sum(axis=1).sum()
        self.el_sum[li, t, route, qty] += a.sum()
        self.el_sq[li, t, route, qty] += (a * a).sum()
        self.el_count[li, t, route, qty] += a.size

    def sums(self):
        """Mean over samples of the per-sample summed magnitude."""
        return self.spatial / max(self.count, 1)

    def means(self):
        return self.el_sum / np.maximum(self.el_count, 1)

    def stds(self):
        m = self.means()
        var = self.el_sq / np.maximum(self.el_count, 1) - m * m
        return np.sqrt(np.maximum(var, 0.0))

    def rows(self):
        """(layer, timestep, route, quantity, sum, mean, std) tuples."""
        s, m, d = self.sums(), self.means(), self.stds()
        out = []
        for li, layer in enumerate(self.layers):
            for t in range(self.steps):
                for r, route in enumerate(ROUTE_NAMES):
                    for q, qty in enumerate(QUANTITY_NAMES):
                        out.append((layer, t, route, qty,
                                    s[li, t, r, q], m[li, t, r, q], d[li, t, r, q]))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("layer", "timestep", "route", "quantity", "sum", "mean", "std"))
            for row in self.rows():
                w.writerow((row[0], row[1], row[2], row[3],
                            f"{row[4]:.9g}", f"{row[5]:.9g}", f"{row[6]:.9g}"))


def imbalance_ratio(stats: RouteStats):
    """Time-averaged forward over backward summed magnitude, per layer.

    A silent backward route reports infinity rather than raising."""
    if stats.count == 0:
        raise ValueError("route stats are empty")
    s = stats.sums()
    fwd = s[:, :, 0, 1].mean(axis=1)
    bwd = s[:, :, 1, 1].mean(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(bwd > 0, fwd / np.where(bwd > 0, bwd, 1.0), np.inf)


def instrumented_layers(geo):
    """Conv layers observed by the probe: all but the first, and never
    the output layer (which has no backward route)."""
    return tuple(k for k in range(1, geo.n_conv) if k < geo.n_layers - 1)


def probe_routes(params: Parameters, images, labels, net: NetworkConfig,
                 dcfg: DynamicsConfig, ecfg: EPConfig,
                 scfg: SpikingConfig | None = None, mode: str = "crnn",
                 pooling_kind: str | None = None,
                 batch_size: int | None = None) -> RouteStats:
    """Record route magnitudes during nudged relaxation.

    The network first settles freely, then the probe watches every step
    of the nudged phase.  ``pooling_kind`` swaps the pooling operator of
    every pooled layer before resolving geometry; weight shapes do not
    depend on it, so one parameter set serves all variants.
    """
    if pooling_kind is not None:
        net = net.with_pooling(pooling_kind)
    geo = net.resolve()
    layers = instrumented_layers(geo)
    if geo.n_conv < 2 or not layers:
        raise ValueError("route probe needs at least 2 conv layers below the top")

    stats = RouteStats(layers=layers, steps=dcfg.t_nudge)
    if batch_size is None:
        batch_size = min(len(images), ecfg.batch_size)
    dtype = params.weights[0].dtype

    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size].astype(dtype)
        y = labels[start:start + batch_size]
        target = onehot(y, geo.output_size).astype(dtype)
        state = NeuronState.zeros(geo, x.shape[0], dtype)
        relax(state, params, geo, dcfg, x, mode=mode, scfg=scfg, snapshot=False)

        def rec(t, signals, drives, routes):
            for li, k in enumerate(layers):
                stats._accumulate(li, t, 0, 0, signals[k])
                stats._accumulate(li, t, 0, 1, routes.forward[k])
                stats._accumulate(li, t, 1, 0, signals[k + 2])
                stats._accumulate(li, t, 1, 1, routes.backward[k])

        relax(state, params, geo, dcfg, x, mode=mode, scfg=scfg, snapshot=False,
              nudge_fn=make_nudge(target, ecfg.beta, ecfg.loss), recorder=rec)
        stats.count += x.shape[0]
    return stats
