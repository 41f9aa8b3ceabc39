"""Spiking communication: sigma-delta quantization with predictive coding.

Neurons exchange binary spikes instead of analog signals.  A transmitting
neuron encodes the innovation of its signal (what the receiver cannot
predict), a sigma-delta quantizer turns that into spikes while carrying
the residual forward in a potential, and the receiver's decode trace
reconstructs the weighted signal exactly in the absence of quantization
error.  The underlying state dynamics are the same gated Euler step as the
continuous model, driven by the decode trace.
"""

from __future__ import annotations

import numpy as np

from epconv import kernels
from epconv.config import DynamicsConfig, NetGeometry, SpikingConfig
from epconv.dynamics import NeuronState, Parameters
from epconv.layers import compute_drives

__all__ = [
    "sigma_delta_step",
    "predictive_encode",
    "predictive_decode",
    "encode_input",
    "step_snn",
]


def sigma_delta_step(v, x, threshold=0.5):
    """One quantizer step.  Returns (spikes, new_potential).

    The potential accumulates the input; a spike fires when it exceeds the
    threshold and the emitted value is subtracted, so quantization error
    never accumulates.
    """
    v = v + x
    if isinstance(v, np.ndarray):
        s = (v > threshold).astype(v.dtype)
    else:
        s = 1.0 if v > threshold else 0.0
    return s, v - s


def predictive_encode(sig, sig_prev, decay):
    """Innovation of a signal given its previous value: what must be sent
    so the receiver's decay-weighted trace tracks the signal exactly."""
    return (sig - (1.0 - decay) * sig_prev) / decay


def predictive_decode(trace, weighted_spikes, decay):
    """Receiver-side reconstruction: decay the trace, mix in the arrivals."""
    return (1.0 - decay) * trace + decay * weighted_spikes


def encode_input(state: NeuronState, x, scfg: SpikingConfig):
    """Advance the input quantizer one step; fills ``state.input_s``.

    The image is predictively encoded like any other signal (with the
    pre-presentation value zero), so the first step carries a kick of
    x/decay and later steps send x itself.
    """
    e = predictive_encode(x, state.input_prev, scfg.decay)
    s = kernels.sigma_delta(state.input_v, e, scfg.threshold)
    np.copyto(state.input_s, s)
    np.copyto(state.input_prev, x)
    return state.input_s


def step_snn(state: NeuronState, params: Parameters, geo: NetGeometry, dcfg: DynamicsConfig,
             scfg: SpikingConfig, input_spikes, nudge_fn=None, record=None):
    """One synchronous spiking step.

    Drives are assembled from the previous step's spikes (``input_spikes``
    for layer 0), then every layer decodes, integrates, encodes and fires
    in place.  The nudge is computed on the analog output state, not on
    spikes.
    """
    signals = [input_spikes] + state.s
    drives, routes = compute_drives(signals, params.weights, params.biases, geo)
    if nudge_fn is not None:
        drives[-1] += nudge_fn(state.xi[-1])
    if record is not None:
        record(signals, drives, routes)
    for k in range(geo.n_layers):
        kernels.snn_update(
            state.xi[k], state.rho_prev[k], state.v[k], state.d[k], state.s[k],
            drives[k], dcfg.step_size, scfg.decay, scfg.threshold,
        )
