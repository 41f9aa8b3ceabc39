"""Equilibrium-propagation training for convolutional convergent RNNs.

Networks relax to a fixed point of an energy function, are nudged toward a
target, and learn from the contrast between the two equilibria.  Both a
continuous (CRNN) and a spiking (sigma-delta + predictive coding) neuron
model are supported, along with a BPTT/finite-difference oracle used to
check the equilibrium-propagation gradient estimates.
"""

from epconv.config import (
    ConfigError,
    DynamicsConfig,
    EPConfig,
    LayerSpec,
    NetworkConfig,
    PoolingSpec,
    SpikingConfig,
)
from epconv.dynamics import (
    NeuronState,
    Parameters,
    energy,
    hard_sigmoid,
    hard_sigmoid_deriv,
    init_parameters,
    relax,
    step_crnn,
)
from epconv.spiking import (
    predictive_decode,
    predictive_encode,
    sigma_delta_step,
    step_snn,
)

__version__ = "0.1.0"
