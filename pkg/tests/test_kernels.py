"""Kernel correctness: loop oracles, adjoint identities, backend parity."""

import numpy as np
import pytest

from epconv import kernels
from reference import avgpool_naive, conv2d_naive, maxpool_naive

RTOL = {"numpy": 1e-12, "numba": 1e-10}


def rand_case(rng):
    b = int(rng.integers(1, 4))
    ci = int(rng.integers(1, 4))
    co = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    h = int(rng.integers(k, k + 6))
    w = int(rng.integers(k, k + 6))
    x = rng.standard_normal((b, ci, h, w))
    wt = rng.standard_normal((co, ci, k, k))
    return x, wt, stride, pad


def test_conv2d_matches_loop_oracle(backend):
    rng = np.random.default_rng(11)
    for _ in range(100):
        x, w, stride, pad = rand_case(rng)
        got = kernels.conv2d(x, w, stride, pad)
        want = conv2d_naive(x, w, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv2d_transpose_is_adjoint(backend):
    # <conv(x), g> == <x, convT(g)> for random shapes
    rng = np.random.default_rng(12)
    for _ in range(120):
        x, w, stride, pad = rand_case(rng)
        y = kernels.conv2d(x, w, stride, pad)
        g = rng.standard_normal(y.shape)
        xt = kernels.conv2d_transpose(g, w, stride, pad, x.shape[2:])
        assert xt.shape == x.shape
        lhs = float((y * g).sum())
        rhs = float((x * xt).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_conv2d_wgrad_is_adjoint(backend):
    # <conv(x; w), g> == <w, wgrad(x, g)>
    rng = np.random.default_rng(13)
    for _ in range(120):
        x, w, stride, pad = rand_case(rng)
        y = kernels.conv2d(x, w, stride, pad)
        g = rng.standard_normal(y.shape)
        wg = kernels.conv2d_wgrad(x, g, stride, pad, w.shape[2])
        assert wg.shape == w.shape
        lhs = float((y * g).sum())
        rhs = float((w * wg).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_maxpool_pinned_values():
    x = np.array([[[[1.0, 3.0], [2.0, 0.0]]]])
    y, idx = kernels.maxpool(x, 2)
    assert y[0, 0, 0, 0] == 3.0
    assert idx[0, 0, 0, 0] == 1  # row 0, col 1 of the zone


def test_maxpool_tie_takes_first_in_row_major_order():
    x = np.array([[[[5.0, 5.0], [0.0, 0.0]]]])
    y, idx = kernels.maxpool(x, 2)
    assert y[0, 0, 0, 0] == 5.0
    assert idx[0, 0, 0, 0] == 0


def test_maxpool_tie_break_deterministic_many_cases(backend):
    # coarse value grid makes in-zone ties common; winner must always be
    # the first maximal entry in row-major zone order, on every backend
    rng = np.random.default_rng(77)
    for _ in range(120):
        f = int(rng.integers(2, 4))
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        ho, wo = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.integers(0, 3, (b, c, ho * f, wo * f)).astype(np.float64) / 2
        y, idx = kernels.maxpool(x, f)
        yn, idxn = maxpool_naive(x, f)
        assert np.array_equal(y, yn)
        assert np.array_equal(idx, idxn)
        y2, idx2 = kernels.maxpool(x.copy(), f)
        assert np.array_equal(idx, idx2)


def test_maxpool_matches_loop_oracle(backend):
    rng = np.random.default_rng(14)
    for _ in range(100):
        f = int(rng.integers(1, 4))
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        ho, wo = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.standard_normal((b, c, ho * f, wo * f))
        y, idx = kernels.maxpool(x, f)
        yn, idxn = maxpool_naive(x, f)
        np.testing.assert_array_equal(y, yn)
        np.testing.assert_array_equal(idx.astype(np.int64), idxn)


def test_maxunpool_places_value_at_winner(backend):
    rng = np.random.default_rng(15)
    for _ in range(100):
        f = int(rng.integers(1, 4))
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        ho, wo = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((b, c, ho * f, wo * f))
        y, idx = kernels.maxpool(x, f)
        up = kernels.maxunpool(y, idx, f)
        assert up.shape == x.shape
        # scatter oracle: the pooled value lands on the recorded cell, zeros elsewhere
        zones = np.zeros((b, c, ho, wo, f * f), dtype=y.dtype)
        np.put_along_axis(zones, idx[..., None].astype(np.intp), y[..., None], axis=-1)
        want = zones.reshape(b, c, ho, wo, f, f).transpose(0, 1, 2, 4, 3, 5)
        want = want.reshape(b, c, ho * f, wo * f)
        np.testing.assert_array_equal(up, want)


def test_max_pool_unpool_adjoint(backend):
    # <pool(x), y> == <x, unpool(y)> with routing fixed by pool(x)
    rng = np.random.default_rng(16)
    for _ in range(120):
        f = int(rng.integers(1, 4))
        x = rng.standard_normal((2, 2, 3 * f, 2 * f))
        p, idx = kernels.maxpool(x, f)
        y = rng.standard_normal(p.shape)
        up = kernels.maxunpool(y, idx, f)
        assert abs(float((p * y).sum() - (x * up).sum())) < 1e-9


def test_avgpool_matches_loop_oracle(backend):
    rng = np.random.default_rng(17)
    for _ in range(100):
        f = int(rng.integers(1, 4))
        x = rng.standard_normal((2, 3, 2 * f, 3 * f))
        np.testing.assert_allclose(kernels.avgpool(x, f), avgpool_naive(x, f), rtol=1e-12)


def test_avgunpool_pinned_value(backend):
    y = np.full((1, 1, 1, 1), 2.5)
    up = kernels.avgunpool(y, 2, 4.0)
    np.testing.assert_allclose(up, np.full((1, 1, 2, 2), 0.625))


def test_avg_pool_unpool_roundtrip_scales_by_alpha(backend):
    rng = np.random.default_rng(18)
    for _ in range(100):
        f = int(rng.integers(1, 4))
        alpha = float(rng.uniform(0.5, 6.0))
        y = rng.standard_normal((2, 2, 3, 2))
        back = kernels.avgpool(kernels.avgunpool(y, f, alpha), f)
        np.testing.assert_allclose(back, y / alpha, rtol=1e-9)


def test_avg_pool_unpool_adjoint_at_default_alpha(backend):
    # alpha = f**2 makes unpool the exact transpose of pool
    rng = np.random.default_rng(19)
    for _ in range(100):
        f = int(rng.integers(1, 4))
        x = rng.standard_normal((2, 2, 2 * f, 3 * f))
        y = rng.standard_normal((2, 2, 2, 3))
        lhs = float((kernels.avgpool(x, f) * y).sum())
        rhs = float((x * kernels.avgunpool(y, f, float(f * f))).sum())
        assert abs(lhs - rhs) < 1e-9


def test_backend_parity_conv_and_pool():
    if "numba" not in kernels.available_backends():
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(20)
    for _ in range(30):
        x, w, stride, pad = rand_case(rng)
        with kernels.use_backend("numpy"):
            y0 = kernels.conv2d(x, w, stride, pad)
            g = rng.standard_normal(y0.shape)
            t0 = kernels.conv2d_transpose(g, w, stride, pad, x.shape[2:])
            w0 = kernels.conv2d_wgrad(x, g, stride, pad, w.shape[2])
        with kernels.use_backend("numba"):
            y1 = kernels.conv2d(x, w, stride, pad)
            t1 = kernels.conv2d_transpose(g, w, stride, pad, x.shape[2:])
            w1 = kernels.conv2d_wgrad(x, g, stride, pad, w.shape[2])
        np.testing.assert_allclose(y0, y1, rtol=1e-10)
        np.testing.assert_allclose(t0, t1, rtol=1e-10)
        np.testing.assert_allclose(w0, w1, rtol=1e-10, atol=1e-12)


def test_crnn_update_matches_formula(backend):
    rng = np.random.default_rng(21)
    for _ in range(100):
        xi = rng.uniform(-0.5, 1.5, (3, 7))
        drive = rng.standard_normal((3, 7))
        eps = float(rng.uniform(0.05, 1.0))
        gate = ((xi >= 0) & (xi <= 1)).astype(xi.dtype)
        want = np.clip((1 - eps) * xi + eps * gate * drive, 0.0, 1.0)
        got = xi.copy()
        kernels.crnn_update(got, drive, eps)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_snn_update_matches_step_by_step_formula(backend):
    rng = np.random.default_rng(22)
    for _ in range(100):
        shape = (2, 5)
        xi = rng.uniform(0, 1, shape)
        rho_prev = xi.copy()
        v = rng.uniform(-0.5, 0.5, shape)
        d = rng.uniform(-0.5, 0.5, shape)
        s = np.zeros(shape)
        phi = rng.standard_normal(shape)
        eps, lam, thr = 0.9, 0.6, 0.5
        # reference: the five lines of the neuron update, written out
        d_ref = (1 - lam) * d + lam * phi
        gate = ((xi >= 0) & (xi <= 1)).astype(xi.dtype)
        xi_ref = np.clip((1 - eps) * xi + eps * gate * d_ref, 0.0, 1.0)
        e_ref = (xi_ref - (1 - lam) * rho_prev) / lam
        v_acc = v + e_ref
        s_ref = (v_acc > thr).astype(xi.dtype)
        v_ref = v_acc - s_ref
        kernels.snn_update(xi, rho_prev, v, d, s, phi, eps, lam, thr)
        np.testing.assert_allclose(d, d_ref, rtol=1e-12)
        np.testing.assert_allclose(xi, xi_ref, rtol=1e-12)
        np.testing.assert_allclose(s, s_ref)
        np.testing.assert_allclose(v, v_ref, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(rho_prev, xi_ref, rtol=1e-12)
