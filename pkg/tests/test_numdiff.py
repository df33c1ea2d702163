import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsa.field import Grid, SpatioTemporalField, TimeAxis
from dsa.numdiff import (
    RegressionError,
    SobolevConfig,
    axis_derivative,
    detect_jumps,
    fd_weights,
    global_fit_operator,
    local_polynomial_fit,
    mixed_partial,
    multiplicity,
    multisets,
    richardson_stencil,
    space_derivatives,
    state_space_gradient,
    time_derivative_array,
    time_derivatives,
)


def test_fd_weights_match_textbook():
    assert np.allclose(fd_weights((-1, 0, 1), 1), [-0.5, 0.0, 0.5])
    assert np.allclose(fd_weights((-1, 0, 1), 2), [1.0, -2.0, 1.0])
    assert np.allclose(fd_weights((0, 1, 2), 1), [-1.5, 2.0, -0.5])


def test_richardson_stencil_is_sixth_order():
    offs, w = richardson_stencil(1)
    # exact on polynomials up to degree 6, not on degree 7
    for p in range(8):
        exact = 1.0 if p == 1 else 0.0
        val = np.sum(w * offs.astype(float) ** p)
        if p <= 6:
            assert np.isclose(val, exact, atol=1e-12)
        else:
            assert not np.isclose(val, exact, atol=1e-6)


def test_fifth_derivative_of_t5():
    h = 0.1
    t = np.arange(41) * h
    td = time_derivative_array(t**5, h, 5, detect=False)
    d5 = td.derivs[4, 0, :, 0]
    assert td.valid[4].all()
    assert np.max(np.abs(d5 - 120.0)) / 120.0 <= 1e-6


def test_first_derivative_of_sin_and_convergence_order():
    errs = []
    steps = [0.08, 0.04, 0.02, 0.01]
    for h in steps:
        t = np.arange(-100, 101) * h
        td = time_derivative_array(np.sin(t), h, 1, detect=False)
        errs.append(abs(td.derivs[0, 0, 100, 0] - 1.0))
    assert errs[-1] <= 1e-8
    # fit on the steps above round-off
    order = np.polyfit(np.log(steps[:3]), np.log(errs[:3]), 1)[0]
    assert order >= 4


def test_one_sided_ends_are_flagged_and_accurate():
    h = 0.05
    t = np.arange(60) * h
    td = time_derivative_array(np.exp(t), h, 2, detect=False)
    assert td.one_sided[0, 0, 0, 0] and not td.one_sided[0, 0, 30, 0]
    assert np.allclose(td.derivs[1, 0, :, 0], np.exp(t), rtol=1e-6)


def test_constant_field_has_zero_derivatives():
    f = SpatioTemporalField(Grid([0.0, 1.0], [0.0, 1.0]), TimeAxis.regular(30), np.full((30, 2, 2), 2.5))
    st_ = time_derivatives(f, SobolevConfig(beta=4))
    assert np.max(np.abs(st_.time_derivs)) <= 1e-12


def test_jump_splits_stencils():
    h = 0.1
    t = np.arange(200) * h
    x = np.sin(t) + (t > 10.0) * 3.0
    jumps = detect_jumps(x[:, None])
    assert jumps[:, 0].sum() == 1 and jumps[100, 0]
    td = time_derivative_array(x, h, 1)
    ok = td.valid[0, 0, :, 0]
    assert np.allclose(td.derivs[0, 0, ok, 0], np.cos(t[ok]), atol=1e-6)


def test_short_record_rejected():
    with pytest.raises(ValueError, match="shorter"):
        time_derivative_array(np.arange(5.0), 1.0, 3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=7, max_size=7), st.sampled_from([0.05, 0.1, 0.2]))
def test_polynomials_up_to_degree_6_differentiated_exactly(coefs, h):
    t = np.arange(-20, 21) * h
    p = np.polynomial.Polynomial(coefs)
    td = time_derivative_array(p(t), h, 2, detect=False)
    scale = 1.0 + np.max(np.abs(p.deriv(1)(t))) + np.max(np.abs(p.deriv(2)(t)))
    assert np.allclose(td.derivs[0, 0, :, 0], p.deriv(1)(t), atol=1e-7 * scale / h)
    assert np.allclose(td.derivs[1, 0, :, 0], p.deriv(2)(t), atol=1e-7 * scale / h**2)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_time_derivative_is_linear(a, b):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 40)).cumsum(axis=1)
    d = lambda v: time_derivative_array(v, 0.5, 2, detect=False).derivs
    assert np.allclose(d(a * x + b * y), a * d(x) + b * d(y), atol=1e-9)


def test_compact_derivative_of_cosine_with_convergence():
    errs = []
    for n in (64, 128, 256):
        h = 2 * np.pi / n
        s = np.arange(n + 1) * h
        errs.append(np.max(np.abs(axis_derivative(np.cos(s), h, 1, 0) + np.sin(s))))
    assert errs[-1] <= 1e-6
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.8)


def test_separable_mixed_partial():
    h = 0.02
    lat = np.arange(0, 1.5, h)
    lon = np.arange(0, 2.0, h)
    f = np.sin(lat)[:, None] * np.exp(-lon)[None, :]
    m = mixed_partial(f, (h, h), (1, 1), (0, 1))
    assert np.max(np.abs(m + np.cos(lat)[:, None] * np.exp(-lon)[None, :])) <= 1e-6


def test_linear_ramp_second_derivative_vanishes():
    r = np.arange(20) * 0.1
    assert np.max(np.abs(axis_derivative(2.0 * r - 1.0, 0.1, 2, 0))) <= 1e-10


def test_space_derivatives_on_field():
    lat = np.linspace(0.0, 20.0, 21)
    lon = np.linspace(0.0, 40.0, 41)
    vals = (lat[:, None] ** 2 + 3 * lon[None, :])[None] * np.ones((2, 1, 1))
    f = SpatioTemporalField(Grid(lat, lon), TimeAxis.regular(2), vals)
    sd = space_derivatives(f, SobolevConfig(beta=2))
    assert np.allclose(sd.space_derivs[(1, 0)][0, 0], 2 * lat[:, None] * np.ones(41), atol=1e-8)
    assert np.allclose(sd.space_derivs[(0, 1)], 3.0, atol=1e-8)
    assert np.allclose(sd.space_derivs[(2, 0)], 2.0, atol=1e-8)
    assert np.allclose(sd.space_derivs[(1, 1)], 0.0, atol=1e-8)


def test_multiset_bookkeeping():
    assert multisets(2, 2) == ((0, 0), (0, 1), (1, 1))
    assert multiplicity((0, 1)) == 2 and multiplicity((0, 0, 1)) == 3
    assert len(multisets(3, 3)) == math.comb(5, 3)


def _exp_trajectory(a, n=400, h=0.01):
    t = np.arange(n) * h
    x = 0.5 + np.exp(a * t)
    return x - 0.5, a * (x - 0.5)


@pytest.mark.parametrize("a", [-1.3, 0.7])
def test_linear_gradient_recovered(a):
    x, xdot = _exp_trajectory(a)
    g1 = state_space_gradient(x[:, None], xdot[:, None], 1, degree=2)
    g2 = state_space_gradient(x[:, None], xdot[:, None], 2, degree=2)
    assert np.allclose(g1, a, atol=1e-8)
    assert np.max(np.abs(g2)) <= 1e-6
    # direct least squares on the full record
    slope = np.linalg.lstsq(np.column_stack([np.ones_like(x), x]), xdot, rcond=None)[0][1]
    assert np.isclose(np.median(g1), slope, atol=1e-8)


def test_quadratic_tendency_second_derivative():
    x = np.linspace(-1.0, 1.0, 300)
    g2 = state_space_gradient(x[:, None], (x**2)[:, None], 2, degree=3)
    assert np.allclose(g2, 2.0, atol=1e-6)


def test_noise_response_within_null_band():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(400, 1))
    y = rng.normal(size=400)
    w = np.ones(400)
    targets = [(0,), (0, 0)]
    L = global_fit_operator(x, 2, targets, w)
    coef = L @ y
    null = np.array([L @ rng.permutation(y) for _ in range(1000)])
    q95 = np.quantile(np.abs(null), 0.95, axis=0)
    assert np.all(np.abs(coef) <= q95)


def test_local_fit_rank_deficiency_is_reported():
    x = np.zeros((100, 2))
    x[:, 0] = np.linspace(0, 1, 100)
    with pytest.raises(RegressionError, match="condition"):
        local_polynomial_fit(x, x[:, :1], 2)
    with pytest.raises(RegressionError, match="samples"):
        local_polynomial_fit(np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10), 2)
