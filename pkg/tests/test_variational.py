import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from palmerlin import F_matrix, Z_solve, first_variation, integrate_flow, linear_diag, second_variation
from palmerlin.errors import CapabilityError
from palmerlin.system import SystemDef
from palmerlin.variational import z_backward


def test_first_variation_matches_oracle(ex4, tight):
    res = first_variation(ex4, 1.0, [0.7], -4.0, tight)
    for s in (0.5, -1.0, -3.5):
        assert res.dphi(s)[0, 0] == pytest.approx(ex4.oracle["dphi"](s, 1.0, [0.7])[0, 0], rel=1e-8)
    assert res.det_positive()


def test_first_variation_linear_is_transition(lin2):
    res = first_variation(lin2, 0.0, [1.0, 1.0], -2.0)
    assert np.allclose(res.dphi(-2.0), lin2.oracle["Psi"](-2.0, 0.0), rtol=1e-8)


def test_second_variation_vs_finite_difference(ex4, tight):
    x, eps = 0.9, 1e-4
    w = second_variation(ex4, 0.0, [x], -3.0, 0, 0, tight)
    up = first_variation(ex4, 0.0, [x + eps], -3.0, tight).dphi(-3.0)[0, 0]
    dn = first_variation(ex4, 0.0, [x - eps], -3.0, tight).dphi(-3.0)[0, 0]
    assert w(-3.0)[0] == pytest.approx((up - dn) / (2 * eps), rel=1e-6)
    assert w(0.0)[0] == 0.0


def test_second_variation_needs_d2f():
    sys = SystemDef(n=1, A=lambda t: np.array([[-1.0]]), f=lambda t, x: 0.1 * np.sin(x),
                    Df=lambda t, x: np.array([[0.1 * math.cos(x[0])]]))
    with pytest.raises(CapabilityError):
        second_variation(sys, 0.0, [1.0], -1.0, 0, 0)


def test_z_matches_closed_form(ex4):
    zr = Z_solve(ex4, 0.5, [1.0], -10.0)
    x_t = integrate_flow(ex4, 0.0, [1.0], 0.5).y_end
    for s in (0.0, -1.0, -4.0, -10.0):
        assert zr.Z(s)[0, 0] == pytest.approx(ex4.oracle["Z"](s, 0.5, x_t)[0, 0], rel=1e-7)


def test_z_equals_psi_times_dphi(ex4):
    t = 0.0
    zr = Z_solve(ex4, t, [1.3], -6.0)
    var = first_variation(ex4, t, [1.3], -6.0)
    for s in (-1.0, -6.0):
        assert zr.Z(s)[0, 0] == pytest.approx(math.exp(-(t - s)) * var.dphi(s)[0, 0], rel=1e-7)


def test_z_gronwall_type_bound(ex4):
    zr = Z_solve(ex4, 0.0, [0.2], -15.0)
    assert zr.bound_ok
    for s in np.linspace(-15.0, 0.0, 7):
        assert abs(zr.Z(s)[0, 0]) <= math.exp(zr.F_integral(s)) * (1 + 1e-9)


def test_z_linear_is_identity(lin2):
    zr = Z_solve(lin2, 0.0, [1.0, -1.0], -20.0)
    assert np.allclose(zr.Z(-20.0), np.eye(2), atol=1e-12)
    assert zr.converged


def test_z_solve_requires_s_below_t(ex4):
    with pytest.raises(ValueError):
        Z_solve(ex4, 0.0, [1.0], 1.0)


def test_z_early_stop_and_limit(ex4, frozen):
    zr = z_backward(ex4, 0.0, np.array([1.0]), -200.0, stop_early=True)
    assert zr.converged
    assert zr.s_end > -60.0
    assert zr.converged_limit[0, 0] == pytest.approx(frozen["DH_0_1"], rel=1e-8)


@given(st.floats(-2, 2), st.floats(-3, 3))
def test_F_matrix_scalar_form(r, xi):
    from palmerlin import example4

    sys = example4()
    F = F_matrix(sys, 1.0, r, [xi])
    assert F[0, 0] == pytest.approx(sys.oracle["F"](r, [xi])[0, 0], rel=1e-7)


def test_hessian_block_matches_second_variation(ex4, tight):
    zr = z_backward(ex4, 0.0, np.array([0.8]), -5.0, tight, hessian=True)
    w = second_variation(ex4, 0.0, [0.8], -5.0, 0, 0, tight)
    assert zr.hessian(-5.0)[0, 0, 0] == pytest.approx(math.exp(-5.0) * w(-5.0)[0], rel=1e-7)
