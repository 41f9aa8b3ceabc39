"""Byte accounting and route-probe behavior."""

import numpy as np
import pytest

from epconv.config import (DynamicsConfig, EPConfig, LayerSpec, NetworkConfig,
                           PoolingSpec, SpikingConfig)
from epconv.diagnostics import (MemoryAccountant, RouteStats, imbalance_ratio,
                                instrumented_layers, memory_report, probe_routes)
from epconv.dynamics import init_parameters, Parameters
from epconv.seeding import substream
from epconv.training import onehot, train_batch


def probe_net():
    return NetworkConfig(
        input_shape=(1, 16, 16),
        layers=(
            LayerSpec(kind="conv", channels=4, kernel=3),
            LayerSpec(kind="conv", channels=8, kernel=3,
                      pooling=PoolingSpec(kind="max", size=2)),
            LayerSpec(kind="linear", features=10),
        ),
    )


def probe_data(n=20, seed=3):
    rng = substream(seed, "probe-data")
    x = rng.uniform(0.0, 1.0, (n, 1, 16, 16)).astype(np.float32)
    y = rng.integers(0, 10, n)
    return x, y


# ---- accountant ----


def test_accountant_tracks_current_and_peak():
    a = MemoryAccountant()
    assert a.peak == 0  # nothing registered yet
    a.note("a", 100)
    a.note("b", 50)
    assert a.current == 150 and a.peak == 150
    a.release("a")
    assert a.current == 50 and a.peak == 150
    a.note("c", 30)
    assert a.peak == 150  # 80 < old peak


def test_accountant_renote_replaces():
    a = MemoryAccountant()
    a.note("x", 100)
    a.note("x", 40)
    assert a.current == 40
    a.release("x")
    assert a.current == 0


def test_accountant_peak_breakdown_is_complete():
    a = MemoryAccountant()
    a.note("a", 7)
    a.note("b", 11)
    a.release("a")
    a.note("c", 2)
    rep = memory_report(a)
    assert rep["peak_bytes"] == sum(rep["at_peak"].values())
    assert rep["at_peak"] == {"a": 7, "b": 11}
    assert rep["current_bytes"] == 13


def test_accountant_reset():
    a = MemoryAccountant()
    a.note("a", 5)
    a.reset()
    assert a.current == 0 and a.peak == 0 and a.at_peak == {}


def test_train_step_peak_independent_of_relaxation_length():
    net = probe_net()
    geo = net.resolve()
    params = init_parameters(geo, substream(0, "init"))
    x, y = probe_data(8)
    target = onehot(y, geo.output_size)
    peaks = []
    for t_free in (10, 40):
        acct = MemoryAccountant()
        dcfg = DynamicsConfig(step_size=0.5, t_free=t_free, t_nudge=5, strict=False)
        ecfg = EPConfig(beta=0.1, loss="mse", learning_rates=(0.1,) * 3,
                        batch_size=8, epochs=1, seed=0, strict=False)
        train_batch(params, x, target, geo, dcfg, ecfg, mode="crnn", acct=acct)
        peaks.append(acct.peak)
    assert peaks[0] == peaks[1]


# ---- ratio arithmetic ----


def synthetic_stats(fwd_value, bwd_value, steps=4):
    stats = RouteStats(layers=(1,), steps=steps)
    for t in range(steps):
        stats._accumulate(0, t, 0, 1, np.full((2, 3), fwd_value))
        stats._accumulate(0, t, 1, 1, np.full((2, 3), bwd_value))
    stats.count = 2
    return stats


def test_equal_routes_give_ratio_one():
    r = imbalance_ratio(synthetic_stats(0.5, 0.5))
    assert r.shape == (1,)
    assert r[0] == pytest.approx(1.0)


def test_tenfold_forward_gives_ratio_ten():
    r = imbalance_ratio(synthetic_stats(1.0, 0.1))
    assert r[0] == pytest.approx(10.0)


def test_silent_backward_reports_infinity():
    r = imbalance_ratio(synthetic_stats(1.0, 0.0))
    assert np.isinf(r[0])


def test_empty_stats_rejected():
    stats = RouteStats(layers=(1,), steps=2)
    with pytest.raises(ValueError):
        imbalance_ratio(stats)


# ---- the probe itself ----


def test_probe_requires_two_conv_layers():
    net = NetworkConfig(
        input_shape=(1, 16, 16),
        layers=(LayerSpec(kind="conv", channels=4, kernel=3),
                LayerSpec(kind="linear", features=10)),
    )
    geo = net.resolve()
    params = init_parameters(geo, substream(0, "init"))
    x, y = probe_data(4)
    dcfg = DynamicsConfig(step_size=0.5, t_free=5, t_nudge=2, strict=False)
    ecfg = EPConfig(beta=0.1, loss="mse", learning_rates=(0.1, 0.1),
                    batch_size=4, epochs=1, seed=0, strict=False)
    with pytest.raises(ValueError):
        probe_routes(params, x, y, net, dcfg, ecfg)


def test_instrumented_layers_skip_first_conv_and_top():
    geo = probe_net().resolve()
    assert instrumented_layers(geo) == (1,)


def test_zero_weights_give_zero_stats():
    net = probe_net()
    geo = net.resolve()
    params = Parameters(
        weights=[np.zeros(g.weight_shape, dtype=np.float32) for g in geo.layers],
        biases=[np.zeros(g.bias_shape, dtype=np.float32) for g in geo.layers],
    )
    x, y = probe_data(6)
    dcfg = DynamicsConfig(step_size=0.5, t_free=5, t_nudge=3, strict=False)
    ecfg = EPConfig(beta=0.1, loss="mse", learning_rates=(0.1,) * 3,
                    batch_size=6, epochs=1, seed=0, strict=False)
    stats = probe_routes(params, x, y, net, dcfg, ecfg)
    assert stats.count == 6
    # both route outputs and the forward input are dead; only the top
    # signal (X_backward) moves, pushed directly by the nudge
    assert np.all(stats.spatial[:, :, :, 1] == 0)
    assert np.all(stats.spatial[:, :, 0, 0] == 0)
    r = imbalance_ratio(stats)
    assert np.isinf(r).all()  # 0/0 reported as the infinity marker


def test_probe_on_random_net_is_finite_positive():
    net = probe_net()
    geo = net.resolve()
    params = init_parameters(geo, substream(5, "init"))
    x, y = probe_data(10)
    dcfg = DynamicsConfig(step_size=0.5, t_free=20, t_nudge=5, strict=False)
    ecfg = EPConfig(beta=0.1, loss="mse", learning_rates=(0.1,) * 3,
                    batch_size=10, epochs=1, seed=0, strict=False)
    stats = probe_routes(params, x, y, net, dcfg, ecfg, mode="crnn")
    r = imbalance_ratio(stats)
    assert np.isfinite(r).all()
    assert (r > 0).all()


def test_probe_is_deterministic():
    net = probe_net()
    geo = net.resolve()
    params = init_parameters(geo, substream(5, "init"))
    x, y = probe_data(8)
    dcfg = DynamicsConfig(step_size=0.5, t_free=10, t_nudge=4, strict=False)
    ecfg = EPConfig(beta=0.1, loss="mse", learning_rates=(0.1,) * 3,
                    batch_size=4, epochs=1, seed=0, strict=False)
    scfg = SpikingConfig(decay=0.6)
    a = probe_routes(params, x, y, net, dcfg, ecfg, scfg, mode="snn")
    b = probe_routes(params, x, y, net, dcfg, ecfg, scfg, mode="snn")
    assert np.array_equal(a.spatial, b.spatial)
    assert np.array_equal(a.el_sq, b.el_sq)


def test_pooling_swap_keeps_weight_shapes():
    net = probe_net()
    g_max = net.with_pooling("max").resolve()
    g_avg = net.with_pooling("avg").resolve()
    for a, b in zip(g_max.layers, g_avg.layers):
        assert a.weight_shape == b.weight_shape


def test_csv_emission(tmp_path):
    stats = synthetic_stats(1.0, 0.5, steps=3)
    path = tmp_path / "routes.csv"
    stats.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "layer,timestep,route,quantity,sum,mean,std"
    assert len(lines) == 1 + 1 * 3 * 2 * 2
    first = lines[1].split(",")
    assert first[0] == "1" and first[2] == "forward" and first[3] == "X"
