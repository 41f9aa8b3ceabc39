"""Config validation and geometry resolution."""

import warnings

import numpy as np
import pytest

from epconv.config import (ConfigError, DynamicsConfig, EPConfig, LayerSpec,
                           NetworkConfig, PoolingSpec, SpikingConfig)


def conv(ch=4, k=3, pad=0, pool=None, psize=2):
    pooling = PoolingSpec(kind=pool, size=psize) if pool else None
    return LayerSpec(kind="conv", channels=ch, kernel=k, padding=pad, pooling=pooling)


# ---- structural validation ----


def test_rejects_unknown_layer_kind():
    with pytest.raises(ConfigError):
        LayerSpec(kind="dense", features=4)


def test_rejects_pooling_on_linear():
    with pytest.raises(ConfigError):
        LayerSpec(kind="linear", features=4,
                  pooling=PoolingSpec(kind="max", size=2))


def test_rejects_unknown_pooling_kind():
    with pytest.raises(ConfigError):
        PoolingSpec(kind="median", size=2)


def test_rejects_conv_after_linear():
    net = NetworkConfig(input_shape=(1, 8, 8),
                        layers=(LayerSpec(kind="linear", features=4), conv()))
    with pytest.raises(ConfigError, match="conv after linear"):
        net.resolve()


def test_rejects_kernel_larger_than_input():
    net = NetworkConfig(input_shape=(1, 4, 4), layers=(conv(k=6),))
    with pytest.raises(ConfigError, match="does not fit"):
        net.resolve()


def test_rejects_indivisible_pooling():
    net = NetworkConfig(input_shape=(1, 7, 7), layers=(conv(k=3, pool="max"),))
    # 7x7 conv output 5x5, pool 2 does not divide
    with pytest.raises(ConfigError, match="does not divide"):
        net.resolve()


def test_rejects_empty_network():
    with pytest.raises(ConfigError):
        NetworkConfig(input_shape=(1, 8, 8), layers=())


def test_rejects_bad_step_size():
    with pytest.raises(ConfigError):
        DynamicsConfig(step_size=0.0, strict=False)
    with pytest.raises(ConfigError):
        DynamicsConfig(step_size=1.5, strict=False)


def test_rejects_negative_beta():
    with pytest.raises(ConfigError):
        EPConfig(beta=-0.1, strict=False)


def test_rejects_unknown_loss():
    with pytest.raises(ConfigError):
        EPConfig(loss="huber", strict=False)


def test_rejects_bad_decay():
    with pytest.raises(ConfigError):
        SpikingConfig(decay=0.0)


def test_rate_for_mismatched_rate_count():
    cfg = EPConfig(learning_rates=(0.1, 0.2), strict=False)
    with pytest.raises(ConfigError):
        cfg.rate_for(0, n_layers=3)


def test_rate_for_broadcasts_single_rate():
    cfg = EPConfig(learning_rates=(0.25,), strict=False)
    assert cfg.rate_for(2, n_layers=4) == 0.25


# ---- out-of-range values warn but do not fail ----


def test_out_of_range_warns_not_raises():
    with pytest.warns(UserWarning, match="outside the published range"):
        cfg = DynamicsConfig(step_size=0.9, t_free=800, t_nudge=50)
    assert cfg.t_free == 800
    with pytest.warns(UserWarning, match="beta"):
        cfg = EPConfig(beta=0.005)
    assert cfg.beta == 0.005


def test_in_range_values_are_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        DynamicsConfig(step_size=0.9, t_free=250, t_nudge=50)
        EPConfig(beta=0.1, learning_rates=(0.25, 0.15, 0.1, 0.08),
                 batch_size=125, epochs=10)
        SpikingConfig(decay=0.6)


# ---- geometry ----


def test_resolve_published_desk_geometry():
    net = NetworkConfig(
        input_shape=(1, 28, 28),
        layers=(
            conv(ch=16, k=3, pad=1, pool="max"),
            conv(ch=32, k=3, pad=0, pool="max"),
            LayerSpec(kind="linear", features=128),
            LayerSpec(kind="linear", features=10),
        ),
    )
    geo = net.resolve()
    assert [g.state_shape for g in geo.layers] == [
        (16, 14, 14), (32, 6, 6), (128,), (10,)]
    assert geo.layers[0].conv_shape == (16, 28, 28)
    assert geo.layers[2].weight_shape == (128, 32 * 6 * 6)
    assert geo.n_conv == 2 and geo.output_size == 10


def test_resolve_is_deterministic():
    net = NetworkConfig(input_shape=(2, 10, 10),
                        layers=(conv(ch=3, k=3, pool="avg"), LayerSpec(kind="linear", features=5)))
    assert net.resolve() == net.resolve()


def test_with_pooling_swaps_every_pooled_layer():
    net = NetworkConfig(
        input_shape=(1, 8, 8),
        layers=(conv(pool="max"), conv(k=1), LayerSpec(kind="linear", features=2)),
    )
    swapped = net.with_pooling("avg")
    assert swapped.layers[0].pooling.kind == "avg"
    assert swapped.layers[1].pooling is None
    # state shapes are pooling-kind independent
    a = [g.state_shape for g in net.resolve().layers]
    b = [g.state_shape for g in swapped.resolve().layers]
    assert a == b


def test_avg_alpha_defaults_to_zone_area():
    p = PoolingSpec(kind="avg", size=3)
    assert p.resolved_alpha == 9.0
    assert PoolingSpec(kind="avg", size=2, alpha=2.5).resolved_alpha == 2.5
