"""Configuration types and network geometry resolution.

A network is described declaratively (input shape plus a stack of conv and
linear layer specs); ``NetworkConfig.resolve`` turns that into concrete
per-layer shapes once, up front, with validation.  Engine code never
re-derives shapes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np


class ConfigError(ValueError):
    """Raised for structurally invalid or out-of-range configuration."""


# ---- Layer specifications ----


@dataclass(frozen=True)
class PoolingSpec:
    """Pooling attached to a conv layer.  Zones are size x size, stride = size."""

    kind: str = "avg"  # "max" | "avg"
    size: int = 2
    alpha: float | None = None  # avg unpool divisor; None -> size**2

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ConfigError(f"pooling kind must be 'max' or 'avg', got {self.kind!r}")
        if self.size < 1:
            raise ConfigError(f"pooling size must be >= 1, got {self.size}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError(f"pooling alpha must be positive, got {self.alpha}")

    @property
    def resolved_alpha(self) -> float:
        # size**2 makes the average unpool the exact adjoint of the pool.
        return float(self.size**2) if self.alpha is None else float(self.alpha)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack.

    kind="conv": channels, kernel, stride, padding, optional pooling.
    kind="linear": features only.  Linear layers must come after all convs.
    """

    kind: str
    channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pooling: PoolingSpec | None = None
    features: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "linear"):
            raise ConfigError(f"layer kind must be 'conv' or 'linear', got {self.kind!r}")
        if self.kind == "conv":
            if self.channels < 1:
                raise ConfigError("conv layer needs channels >= 1")
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigError("conv layer needs kernel >= 1, stride >= 1, padding >= 0")
        else:
            if self.features < 1:
                raise ConfigError("linear layer needs features >= 1")
            if self.pooling is not None:
                raise ConfigError("pooling is only valid on conv layers")


# ---- Resolved geometry ----


@dataclass(frozen=True)
class LayerGeometry:
    """Concrete shapes for one layer (single sample, no batch dim)."""

    spec: LayerSpec
    in_shape: tuple[int, ...]  # (C, H, W) for conv, (F,) for linear
    conv_shape: tuple[int, ...] | None  # conv output before pooling, None for linear
    state_shape: tuple[int, ...]  # neuron state shape (after pooling if any)
    weight_shape: tuple[int, ...]
    bias_shape: tuple[int, ...]

    @property
    def state_size(self) -> int:
        return int(np.prod(self.state_shape))


@dataclass(frozen=True)
class NetGeometry:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerGeometry, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_conv(self) -> int:
        return sum(1 for g in self.layers if g.spec.kind == "conv")

    @property
    def output_size(self) -> int:
        return self.layers[-1].state_size


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative network description: input shape plus layer stack."""

    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (C, H, W) positive, got {self.input_shape}")
        if not self.layers:
            raise ConfigError("network needs at least one layer")

    def resolve(self) -> NetGeometry:
        geoms = []
        shape: tuple[int, ...] = tuple(self.input_shape)
        seen_linear = False
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                if seen_linear:
                    raise ConfigError(f"layer {i}: conv after linear is not supported")
                c, h, w = shape
                ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                if ho < 1 or wo < 1:
                    raise ConfigError(
                        f"layer {i}: kernel {spec.kernel} does not fit input {h}x{w} "
                        f"with padding {spec.padding}"
                    )
                conv_shape = (spec.channels, ho, wo)
                state_shape = conv_shape
                if spec.pooling is not None:
                    f = spec.pooling.size
                    if ho % f or wo % f:
                        raise ConfigError(
                            f"layer {i}: pooling size {f} does not divide conv output {ho}x{wo}"
                        )
                    state_shape = (spec.channels, ho // f, wo // f)
                geoms.append(
                    LayerGeometry(
                        spec=spec,
                        in_shape=shape,
                        conv_shape=conv_shape,
                        state_shape=state_shape,
                        weight_shape=(spec.channels, c, spec.kernel, spec.kernel),
                        bias_shape=(spec.channels,),
                    )
                )
            else:
                seen_linear = True
                fan_in = int(np.prod(shape))
                geoms.append(
                    LayerGeometry(
                        spec=spec,
                        in_shape=(fan_in,),
                        conv_shape=None,
                        state_shape=(spec.features,),
                        weight_shape=(spec.features, fan_in),
                        bias_shape=(spec.features,),
                    )
                )
            shape = geoms[-1].state_shape
        return NetGeometry(input_shape=tuple(self.input_shape), layers=tuple(geoms))

    def with_pooling(self, kind: str) -> NetworkConfig:
        """Same stack with every pooled conv layer switched to ``kind``."""
        layers = tuple(
            replace(s, pooling=PoolingSpec(kind=kind, size=s.pooling.size))
            if s.pooling is not None
            else s
            for s in self.layers
        )
        return replace(self, layers=layers)


# ---- Run-time hyperparameters ----

# Documented operating ranges; values outside warn at construction but
# are still accepted (structural validity is checked separately).
_RANGES = {
    "beta": (0.01, 1.0),
    "step_size": (0.1, 1.0),
    "decay": (0.1, 1.0),
    "t_free": (50, 500),
    "t_nudge": (10, 100),
    "learning_rate": (0.0, 1.0),
    "batch_size": (10, 500),
    "epochs": (10, 1000),
}


def _check_range(name: str, value, key: str | None = None):
    lo, hi = _RANGES[key or name]
    if not (lo <= value <= hi):
        warnings.warn(
            f"{name}={value} outside the published range [{lo}, {hi}]",
            stacklevel=3,
        )


@dataclass(frozen=True)
class DynamicsConfig:
    """Relaxation parameters shared by both neuron models."""

    step_size: float = 0.5  # Euler step of the state update
    t_free: int = 250
    t_nudge: int = 50
    strict: bool = True  # range-check on construction; tests may relax

    def __post_init__(self):
        if not (0.0 < self.step_size <= 1.0):
            raise ConfigError(f"step_size must be in (0, 1], got {self.step_size}")
        if self.t_free < 1 or self.t_nudge < 1:
            raise ConfigError("t_free and t_nudge must be >= 1")
        if self.strict:
            _check_range("step_size", self.step_size)
            _check_range("t_free", self.t_free)
            _check_range("t_nudge", self.t_nudge)


@dataclass(frozen=True)
class SpikingConfig:
    """Sigma-delta quantization and predictive-coding parameters."""

    decay: float = 0.6  # lambda: decode trace decay / encode scale
    threshold: float = 0.5  # sigma-delta spiking threshold

    def __post_init__(self):
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        _check_range("decay", self.decay)
        if self.threshold <= 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class EPConfig:
    """Learning parameters for the contrastive phase-pair update."""

    beta: float = 0.1
    loss: str = "mse"  # "mse" | "ce"
    learning_rates: tuple[float, ...] = (0.1,)
    batch_size: int = 125
    epochs: int = 10
    seed: int = 0
    strict: bool = True

    def __post_init__(self):
        if self.loss not in ("mse", "ce"):
            raise ConfigError(f"loss must be 'mse' or 'ce', got {self.loss!r}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.learning_rates:
            raise ConfigError("need at least one learning rate")
        if any(lr < 0 for lr in self.learning_rates):
            raise ConfigError("learning rates must be >= 0")
        if self.strict:
            _check_range("beta", self.beta)
            for lr in self.learning_rates:
                _check_range("learning_rate", lr)
            _check_range("batch_size", self.batch_size)
            _check_range("epochs", self.epochs)

    def rate_for(self, layer: int, n_layers: int) -> float:
        """Per-layer rate; a single entry applies to every layer."""
        if len(self.learning_rates) == 1:
            return self.learning_rates[0]
        if len(self.learning_rates) != n_layers:
            raise ConfigError(
                f"{len(self.learning_rates)} learning rates for {n_layers} layers"
            )
        return self.learning_rates[layer]
