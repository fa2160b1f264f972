import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from palmerlin import (
    DichotomyBounds,
    H_eval,
    H_hessian,
    H_hessian_all,
    H_jacobian,
    H_on_trajectory,
    H_with_jacobian,
    L_eval,
    TruncationConfig,
    conjugacy_defect,
    conjugacy_defects,
    example4,
    linear_diag,
    truncation_point,
)
from palmerlin.errors import ConvergenceError, TruncationError

B4 = DichotomyBounds(K=1.0, alpha=1.0, mu=0.1 * math.pi, gamma=0.2)


def test_truncation_point_formula():
    s0, tail = truncation_point(0.0, B4, 1e-8)
    assert tail == pytest.approx(1e-8, rel=1e-9)
    assert s0 == pytest.approx(-math.log(0.1 * math.pi / 1e-8), rel=1e-12)
    assert truncation_point(2.0, DichotomyBounds(1, 1, 0.0), 1e-8) == (2.0, 0.0)


def test_bounds_properties():
    assert B4.h4_ok
    assert B4.palmer_bound == pytest.approx(0.4 * math.pi)
    assert DichotomyBounds(2, 1, 0.1, 0.2).h4_ok is False
    assert DichotomyBounds(1, 1, 0.1).h4_ok is None


@pytest.mark.parametrize("t,x,key", [(0.0, 1.0, "H_0_1"), (1.0, -2.0, "H_1_m2")])
def test_H_matches_frozen_oracle(ex4, frozen, t, x, key):
    res = H_eval(ex4, t, [x], B4)
    assert res.value[0] == pytest.approx(frozen[key], abs=1e-8)
    assert res.certified
    assert res.tail_bound <= 1e-8 * (1 + 1e-9)


def test_H_identity_for_linear(lin2):
    res = H_eval(lin2, 0.3, [1.5, -2.0], DichotomyBounds(1, 1, 0.0))
    assert np.array_equal(res.value, np.array([1.5, -2.0]))
    assert np.array_equal(H_jacobian(lin2, 0.3, [1.5, -2.0]), np.eye(2))
    assert np.array_equal(H_hessian_all(lin2, 0.3, [1.5, -2.0]), np.zeros((2, 2, 2)))


def test_H_origin_fixed(ex4):
    for t in (-2.0, 0.0, 1.5):
        assert H_eval(ex4, t, [0.0], B4).value[0] == 0.0


def test_truncation_cap_raises_with_result(ex4):
    with pytest.raises(TruncationError) as info:
        H_eval(ex4, 0.0, [1.0], B4, TruncationConfig(s_min_cap=-5.0))
    assert info.value.result.truncation_point == -5.0


def test_jacobian_matches_frozen(ex4, frozen):
    assert H_jacobian(ex4, 0.0, [1.0])[0, 0] == pytest.approx(frozen["DH_0_1"], rel=1e-8)
    assert H_jacobian(ex4, -1.0, [0.5])[0, 0] == pytest.approx(frozen["DH_m1_0p5"], rel=1e-8)


def test_jacobian_convergence_error(ex4):
    with pytest.raises(ConvergenceError):
        H_jacobian(ex4, 0.0, [1.0], TruncationConfig(s_min_cap=-3.0))


def test_hessian_matches_frozen(ex4, frozen):
    assert H_hessian(ex4, 0.0, [1.0], 0, 0)[0] == pytest.approx(frozen["D2H_0_1"], rel=1e-6)


def test_fused_matches_separate(ex4):
    res, J = H_with_jacobian(ex4, 0.4, [-1.7], B4)
    assert res.value[0] == pytest.approx(H_eval(ex4, 0.4, [-1.7], B4).value[0], abs=1e-10)
    assert J[0, 0] == pytest.approx(H_jacobian(ex4, 0.4, [-1.7])[0, 0], rel=1e-10)


def test_conjugacy_identity(ex4):
    defects = conjugacy_defects(ex4, [2.0], [-2.0, -1.0, 0.0, 1.0, 2.0], B4)
    assert len(defects) == 5
    assert max(defects) <= 1e-6
    assert conjugacy_defect(ex4, [-1.0], [0.5, 1.5], B4) <= 1e-6


def test_H_on_trajectory(ex4):
    h_t = H_on_trajectory(ex4, [1.0], 1.0, B4)
    h_0 = H_eval(ex4, 0.0, [1.0], B4).value
    assert h_t[0] == pytest.approx(math.exp(-1.0) * h_0[0], abs=1e-8)


@given(st.floats(-3, 3), st.floats(-4, 4))
def test_palmer_bound_and_orientation(t, x):
    sys = example4()
    h = H_eval(sys, t, [x], B4).value[0]
    assert abs(h - x) <= B4.palmer_bound + 1e-8
    assert H_jacobian(sys, t, [x])[0, 0] > 0


@given(st.floats(-2, 2), st.floats(-3, 3))
def test_inverse_round_trip(t, x):
    sys = example4()
    y = H_eval(sys, t, [x], B4).value
    assert abs(L_eval(sys, t, y, B4)[0] - x) <= 1e-8


def test_inverse_linear_is_identity(lin2):
    assert np.array_equal(L_eval(lin2, 0.0, [1.0, 2.0], DichotomyBounds(1, 1, 0.0)), np.array([1.0, 2.0]))


def test_jacobian_matches_finite_differences(ex4, tight):
    x, eps = 1.4, 1e-5
    up = H_eval(ex4, 0.2, [x + eps], B4, cfg=tight).value[0]
    dn = H_eval(ex4, 0.2, [x - eps], B4, cfg=tight).value[0]
    assert H_jacobian(ex4, 0.2, [x], cfg=tight)[0, 0] == pytest.approx((up - dn) / (2 * eps), rel=1e-7)


def _coupled():
    """Two-dimensional test system with a genuinely matrix-valued Df."""
    from palmerlin.system import SystemDef

    A = np.array([[-1.0, 0.2], [0.0, -1.5]])
    c = 0.1

    def f(t, x):
        e = math.exp(-t * t)
        return c * e * np.array([math.tanh(x[1]), math.sin(x[0])])

    def Df(t, x):
        e = math.exp(-t * t)
        return c * e * np.array([[0.0, 1 - math.tanh(x[1]) ** 2], [math.cos(x[0]), 0.0]])

    def D2f(t, x):
        e = math.exp(-t * t)
        th = math.tanh(x[1])
        T = np.zeros((2, 2, 2))
        T[0, 1, 1] = -2 * th * (1 - th * th)
        T[1, 0, 0] = -math.sin(x[0])
        return c * e * T

    return SystemDef(n=2, A=lambda t: A, f=f, Df=Df, D2f=D2f, h5=True, name="coupled")


def test_two_dimensional_derivatives(tight):
    sys = _coupled()
    bounds = DichotomyBounds(1.2, 1.0, 0.1)
    x = np.array([0.6, -0.4])
    J = H_jacobian(sys, 0.0, x, cfg=tight)
    eps = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        fd = (H_eval(sys, 0.0, x + e, bounds, cfg=tight).value - H_eval(sys, 0.0, x - e, bounds, cfg=tight).value)
        assert np.allclose(J[:, j], fd / (2 * eps), rtol=1e-6, atol=1e-9)
    Hs = H_hessian_all(sys, 0.0, x, cfg=tight)
    assert np.allclose(Hs[0, 1], Hs[1, 0], atol=1e-8)
    assert np.linalg.det(J) > 0
