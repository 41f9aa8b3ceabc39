"""Energy, neuron state, and relaxation to equilibrium.

The network is a convergent RNN: from a zero state it repeatedly applies a
gated Euler step until the state settles at a fixed point of the energy.
During learning the output layer additionally receives a small nudge term;
the same relaxation loop serves the free phase (no nudge) and both nudged
phases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from epconv import kernels
from epconv.config import DynamicsConfig, NetGeometry, SpikingConfig
from epconv.kernels.numpy_backend import hard_sigmoid, hard_sigmoid_deriv
from epconv.layers import compute_drives, forward_route

__all__ = [
    "hard_sigmoid",
    "hard_sigmoid_deriv",
    "Parameters",
    "NeuronState",
    "PhaseSnapshot",
    "init_parameters",
    "energy",
    "step_crnn",
    "relax",
]


# ---- parameters ----


@dataclass
class Parameters:
    """Connection weights and biases, one entry per layer."""

    weights: list
    biases: list

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )

    @property
    def nbytes(self) -> int:
        return sum(w.nbytes for w in self.weights) + sum(b.nbytes for b in self.biases)


def init_parameters(geo: NetGeometry, rng: np.random.Generator, dtype=np.float32) -> Parameters:
    """Kaiming-uniform weights, zero biases."""
    weights, biases = [], []
    for g in geo.layers:
        if g.spec.kind == "conv":
            fan_in = g.in_shape[0] * g.spec.kernel**2
        else:
            fan_in = g.in_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=g.weight_shape).astype(dtype))
        biases.append(np.zeros(g.bias_shape, dtype=dtype))
    return Parameters(weights, biases)


# ---- neuron state ----


@dataclass
class NeuronState:
    """Per-layer state arrays, batch-leading.

    ``xi`` is the neuron state proper; ``v``, ``d``, ``s`` and ``rho_prev``
    carry the sigma-delta quantizer, decode trace, last spikes and previous
    signal for the spiking model (allocated either way so the two models
    share one layout).  ``input_v``/``input_s`` belong to the input
    quantizer.
    """

    xi: list
    rho_prev: list
    v: list
    d: list
    s: list
    input_v: np.ndarray
    input_s: np.ndarray
    input_prev: np.ndarray

    @classmethod
    def zeros(cls, geo: NetGeometry, batch: int, dtype=np.float32) -> "NeuronState":
        def alloc():
            return [np.zeros((batch,) + g.state_shape, dtype=dtype) for g in geo.layers]

        def alloc_in():
            return np.zeros((batch,) + geo.input_shape, dtype=dtype)

        return cls(
            xi=alloc(), rho_prev=alloc(), v=alloc(), d=alloc(), s=alloc(),
            input_v=alloc_in(), input_s=alloc_in(), input_prev=alloc_in(),
        )

    def copy(self) -> "NeuronState":
        return NeuronState(
            xi=[a.copy() for a in self.xi],
            rho_prev=[a.copy() for a in self.rho_prev],
            v=[a.copy() for a in self.v],
            d=[a.copy() for a in self.d],
            s=[a.copy() for a in self.s],
            input_v=self.input_v.copy(),
            input_s=self.input_s.copy(),
            input_prev=self.input_prev.copy(),
        )

    @property
    def batch(self) -> int:
        return self.xi[0].shape[0]

    @property
    def nbytes(self) -> int:
        per_layer = sum(
            a.nbytes for group in (self.xi, self.rho_prev, self.v, self.d, self.s) for a in group
        )
        return per_layer + self.input_v.nbytes + self.input_s.nbytes + self.input_prev.nbytes


@dataclass
class PhaseSnapshot:
    """Equilibrium record a phase leaves behind for the learning rule.

    ``pool_idx`` holds the max-pool routing recomputed from the final
    state's signals, so both nudged phases contribute their own routing to
    the weight update.
    """

    xi: list
    pool_idx: list
    input: np.ndarray

    @property
    def nbytes(self) -> int:
        n = sum(a.nbytes for a in self.xi) + self.input.nbytes
        return n + sum(i.nbytes for i in self.pool_idx if i is not None)


# ---- energy ----


def energy(xi, weights, biases, geo: NetGeometry, x) -> np.ndarray:
    """Hopfield energy per sample, [B].

    Quadratic self term on the raw states, minus the interaction of each
    layer's signal with its forward route, minus the bias terms.  The input
    enters only through the first layer's interaction.
    """
    x = np.clip(x, 0.0, 1.0)
    signals = [x] + [hard_sigmoid(z) for z in xi]
    batch = x.shape[0]
    e = np.zeros(batch, dtype=np.result_type(*[z.dtype for z in xi]))
    for k, g in enumerate(geo.layers):
        f, _, _ = forward_route(signals[k], weights[k], g)
        axes = tuple(range(1, xi[k].ndim))
        e += 0.5 * (xi[k] ** 2).sum(axis=axes)
        e -= (signals[k + 1] * f).sum(axis=axes)
        if g.spec.kind == "conv":
            e -= (signals[k + 1] * biases[k][None, :, None, None]).sum(axis=axes)
        else:
            e -= (signals[k + 1] * biases[k][None, :]).sum(axis=axes)
    return e


# ---- relaxation ----


def step_crnn(state: NeuronState, params: Parameters, geo: NetGeometry, dcfg: DynamicsConfig,
              x, nudge_fn=None, record=None):
    """One synchronous continuous-model step; every layer reads the previous
    step's signals.  Mutates ``state.xi`` only."""
    signals = [x] + state.xi
    drives, routes = compute_drives(signals, params.weights, params.biases, geo)
    if nudge_fn is not None:
        drives[-1] += nudge_fn(state.xi[-1])
    if record is not None:
        record(signals, drives, routes)
    for k in range(geo.n_layers):
        kernels.crnn_update(state.xi[k], drives[k], dcfg.step_size)


def relax(state: NeuronState, params: Parameters, geo: NetGeometry, dcfg: DynamicsConfig,
          x, steps=None, mode="crnn", scfg: SpikingConfig | None = None,
          nudge_fn=None, recorder=None, monitor=None, snapshot=True):
    """Run the dynamics for a phase and return its equilibrium snapshot.

    ``steps`` defaults to t_free without a nudge and t_nudge with one.
    ``recorder(t, signals, drives, routes)`` observes each step's drive
    assembly; ``monitor(t, state)`` observes the state after each step.
    """
    if mode not in ("crnn", "snn"):
        raise ValueError(f"mode must be 'crnn' or 'snn', got {mode!r}")
    if mode == "snn" and scfg is None:
        raise ValueError("snn mode needs a SpikingConfig")
    if steps is None:
        steps = dcfg.t_free if nudge_fn is None else dcfg.t_nudge
    x = np.clip(np.asarray(x, dtype=state.xi[0].dtype), 0.0, 1.0)
    if mode == "snn":
        from epconv.spiking import encode_input, step_snn  # deferred: spiking imports this module

    for t in range(steps):
        record = None
        if recorder is not None:
            record = lambda sig, dr, rt, _t=t: recorder(_t, sig, dr, rt)
        if mode == "crnn":
            step_crnn(state, params, geo, dcfg, x, nudge_fn, record)
        else:
            spikes = encode_input(state, x, scfg)
            step_snn(state, params, geo, dcfg, scfg, spikes, nudge_fn, record)
        if monitor is not None:
            monitor(t, state)
    if not snapshot:
        return None
    signals = [x] + [hard_sigmoid(z) for z in state.xi]
    _, routes = compute_drives(signals, params.weights, params.biases, geo)
    return PhaseSnapshot(
        xi=[z.copy() for z in state.xi], pool_idx=list(routes.pool_idx), input=x
    )
