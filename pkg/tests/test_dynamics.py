"""Energy function, gated Euler step, and relaxation behavior.

The heart of this file is the check that one dynamics step moves the state
along the negative energy gradient: the drive assembly (forward plus
backward routes) must agree with a finite-difference probe of the energy,
which ties the two code paths together through an independent computation.
"""

import numpy as np

from epconv.config import DynamicsConfig, LayerSpec, NetworkConfig, PoolingSpec
from epconv import dynamics
from epconv.dynamics import (
    NeuronState,
    energy,
    hard_sigmoid,
    hard_sigmoid_deriv,
    init_parameters,
    relax,
    step_crnn,
)
from reference import avgpool_naive, conv2d_naive, linear_naive, probe_matrix

DCFG = DynamicsConfig(step_size=0.5, t_free=60, t_nudge=20, strict=False)


def toy_net(pool="avg"):
    return NetworkConfig(
        input_shape=(1, 6, 6),
        layers=(
            LayerSpec(kind="conv", channels=2, kernel=3,
                      pooling=PoolingSpec(kind=pool, size=2)),
            LayerSpec(kind="linear", features=4),
        ),
    ).resolve()


# ---- activation ----


def test_hard_sigmoid_pinned_values():
    assert hard_sigmoid(np.array(0.5)) == 0.5
    assert hard_sigmoid(np.array(-1.0)) == 0.0
    assert hard_sigmoid(np.array(2.0)) == 1.0


def test_hard_sigmoid_deriv_window():
    # boundaries count as active so zero-initialized states can move
    u = np.array([-0.1, 0.0, 0.5, 1.0, 1.1])
    np.testing.assert_array_equal(hard_sigmoid_deriv(u), [0.0, 1.0, 1.0, 1.0, 0.0])


def test_hard_sigmoid_monotone_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        u = np.sort(rng.uniform(-3, 3, 50))
        s = hard_sigmoid(u)
        assert (np.diff(s) >= 0).all()
        assert s.min() >= 0.0 and s.max() <= 1.0


# ---- energy ----


def test_energy_single_neuron_pinned():
    geo = NetworkConfig(input_shape=(1, 1, 1),
                        layers=(LayerSpec(kind="linear", features=1),)).resolve()
    w = [np.zeros((1, 1))]
    b = [np.zeros(1)]
    xi = [np.array([[0.5]])]
    x = np.zeros((1, 1, 1, 1))
    np.testing.assert_allclose(energy(xi, w, b, geo, x), [0.125])


def test_energy_matches_global_quadratic_form():
    """Assemble the interaction operators by probing naive loop ops with
    unit vectors; the energy must equal the resulting explicit form."""
    geo = toy_net("avg")
    rng = np.random.default_rng(5)
    params = init_parameters(geo, rng, np.float64)
    params.biases[0][:] = rng.uniform(-0.2, 0.2, 2)
    params.biases[1][:] = rng.uniform(-0.2, 0.2, 4)
    b = 2
    x = rng.uniform(0, 1, (b, 1, 6, 6))
    xi = [rng.uniform(-0.3, 1.3, (b,) + g.state_shape) for g in geo.layers]

    w1 = params.weights[0]

    def op1(v):
        img = v.reshape(1, 1, 6, 6)
        return avgpool_naive(conv2d_naive(img, w1), 2).ravel()

    def op2(v):
        return linear_naive(v.reshape(1, -1), params.weights[1]).ravel()

    m1 = probe_matrix(op1, 36, 8)
    m2 = probe_matrix(op2, 8, 4)

    want = np.zeros(b)
    for i in range(b):
        s1 = np.clip(xi[0][i].ravel(), 0, 1)
        s2 = np.clip(xi[1][i].ravel(), 0, 1)
        want[i] = (
            0.5 * (xi[0][i] ** 2).sum() + 0.5 * (xi[1][i] ** 2).sum()
            - s1 @ m1 @ x[i].ravel()
            - s2 @ m2 @ s1
            - params.biases[0].repeat(4) @ s1  # per-channel bias, 2x2 map each
            - params.biases[1] @ s2
        )
    got = energy(xi, params.weights, params.biases, geo, x)
    np.testing.assert_allclose(got, want, rtol=1e-10)


# ---- single step ----


def test_step_with_full_rate_reaches_bias():
    geo = NetworkConfig(input_shape=(1, 1, 1),
                        layers=(LayerSpec(kind="linear", features=1),)).resolve()
    params = dynamics.Parameters([np.zeros((1, 1))], [np.array([0.3])])
    state = NeuronState.zeros(geo, 1, np.float64)
    dcfg = DynamicsConfig(step_size=1.0, strict=False)
    step_crnn(state, params, geo, dcfg, np.zeros((1, 1, 1, 1)))
    np.testing.assert_allclose(state.xi[0], [[0.3]])


def test_step_descends_finite_difference_energy_gradient():
    """xi' = clip(xi - eps * dE/dxi) at interior states, with dE/dxi taken
    by central differences.  Exercises forward and backward routes against
    the energy itself."""
    geo = toy_net("avg")
    rng = np.random.default_rng(7)
    eps, h = 0.2, 1e-6
    for _ in range(10):
        params = init_parameters(geo, rng, np.float64)
        state = NeuronState.zeros(geo, 1, np.float64)
        # interior states keep rho' == 1 and the clip inactive almost surely
        for z, g in zip(state.xi, geo.layers):
            z[:] = rng.uniform(0.2, 0.8, (1,) + g.state_shape)
        x = rng.uniform(0, 1, (1, 1, 6, 6))

        grad = [np.zeros_like(z) for z in state.xi]
        for li, z in enumerate(state.xi):
            flat = z.reshape(-1)
            gflat = grad[li].reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                ep = energy(state.xi, params.weights, params.biases, geo, x)[0]
                flat[j] = keep - h
                em = energy(state.xi, params.weights, params.biases, geo, x)[0]
                flat[j] = keep
                gflat[j] = (ep - em) / (2 * h)

        want = [np.clip(z - eps * g, 0.0, 1.0) for z, g in zip(state.xi, grad)]
        dcfg = DynamicsConfig(step_size=eps, strict=False)
        step_crnn(state, params, geo, dcfg, x)
        for got, w in zip(state.xi, want):
            np.testing.assert_allclose(got, w, rtol=1e-6, atol=1e-8)


# ---- relaxation ----


def test_relaxation_converges_from_zero():
    geo = toy_net("avg")
    rng = np.random.default_rng(9)
    for trial in range(5):
        params = init_parameters(geo, rng, np.float64)
        x = rng.uniform(0, 1, (2, 1, 6, 6))
        state = NeuronState.zeros(geo, 2, np.float64)
        prev = [z.copy() for z in state.xi]
        changes = []

        def monitor(t, st):
            changes.append(max(float(np.abs(a - b).max()) for a, b in zip(st.xi, prev)))
            for a, b in zip(st.xi, prev):
                b[:] = a

        relax(state, params, geo, DCFG, x, steps=500, monitor=monitor, snapshot=False)
        assert changes[-1] < 1e-6


def test_free_relaxation_does_not_raise_energy():
    geo = toy_net("avg")
    rng = np.random.default_rng(10)
    for trial in range(20):
        params = init_parameters(geo, rng, np.float64)
        x = rng.uniform(0, 1, (1, 1, 6, 6))
        state = NeuronState.zeros(geo, 1, np.float64)
        e0 = energy(state.xi, params.weights, params.biases, geo, x)[0]
        dcfg = DynamicsConfig(step_size=0.3, strict=False)
        relax(state, params, geo, dcfg, x, steps=300, snapshot=False)
        e1 = energy(state.xi, params.weights, params.biases, geo, x)[0]
        assert e1 <= e0 + 1e-9


def test_relax_is_deterministic():
    geo = toy_net("max")
    rng = np.random.default_rng(11)
    params = init_parameters(geo, rng, np.float64)
    x = rng.uniform(0, 1, (2, 1, 6, 6))
    outs = []
    for _ in range(2):
        state = NeuronState.zeros(geo, 2, np.float64)
        relax(state, params, geo, DCFG, x, steps=100, snapshot=False)
        outs.append([z.copy() for z in state.xi])
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


def test_snapshot_is_detached_from_state():
    geo = toy_net("max")
    rng = np.random.default_rng(12)
    params = init_parameters(geo, rng, np.float64)
    x = rng.uniform(0, 1, (1, 1, 6, 6))
    state = NeuronState.zeros(geo, 1, np.float64)
    snap = relax(state, params, geo, DCFG, x, steps=50)
    before = [z.copy() for z in snap.xi]
    relax(state, params, geo, DCFG, x, steps=10, snapshot=False)
    for a, b in zip(snap.xi, before):
        np.testing.assert_array_equal(a, b)


def test_init_parameters_bounds_and_determinism():
    geo = toy_net("avg")
    rng = np.random.default_rng(13)
    p = init_parameters(geo, rng, np.float32)
    assert np.abs(p.weights[0]).max() <= 1.0 / np.sqrt(9)
    assert np.abs(p.weights[1]).max() <= 1.0 / np.sqrt(8)
    assert not p.biases[0].any() and not p.biases[1].any()
    q = init_parameters(geo, np.random.default_rng(13), np.float32)
    for a, b in zip(p.weights, q.weights):
        np.testing.assert_array_equal(a, b)
