import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from palmerlin import (
    DensityPair,
    DichotomyBounds,
    GridSpec,
    change_of_variables_check,
    choose_beta,
    integrability_check,
    linear_diag,
    lyapunov_P,
    make_linear_density,
    rho_bar,
    rho_bar_divergence_check,
    rho_bar_divergence_transport,
    rho_linear,
    rho_linear_divergence,
)
from palmerlin.density import rho_linear_divergence_fd
from palmerlin.errors import DomainError, InconsistencyError, ValidationError
from palmerlin.system import SystemDef

GRID = GridSpec(t_range=(-3.0, 3.0), t_count=7)
B4 = DichotomyBounds(1.0, 1.0, 0.1 * math.pi, 0.2)


@pytest.fixture(scope="module")
def ld4():
    from palmerlin import example4

    return make_linear_density(example4(), 1.0, 1.0, GRID)


@pytest.fixture(scope="module")
def dp4(ld4):
    return DensityPair(ld4, ld4.sys, B4)


@pytest.mark.parametrize("a,T", [(1.0, 20.0), (2.0, 3.0), (0.5, 40.0)])
def test_lyapunov_scalar(a, T):
    P, Psi_T, tail = lyapunov_P(linear_diag([-a]), 0.7, T, K=1.0, alpha=a)
    assert P[0, 0] == pytest.approx((1 - math.exp(-2 * a * T)) / (2 * a), rel=1e-10)
    assert Psi_T[0, 0] == pytest.approx(math.exp(-a * T), rel=1e-9)
    assert tail == pytest.approx(math.exp(-2 * a * T) / (2 * a))


def test_lyapunov_constant_in_t():
    sys = linear_diag([-1.0, -3.0])
    P1 = lyapunov_P(sys, -2.0, 20.0)[0]
    P2 = lyapunov_P(sys, 5.0, 20.0)[0]
    assert np.allclose(P1, P2, rtol=1e-12)
    assert np.allclose(P1, np.diag([0.5, 1 / 6]), rtol=1e-12)


def test_choose_beta_scalar():
    assert choose_beta(linear_diag([-1.0]), 1.0, 1.0, GRID) == 1.0


def test_choose_beta_diag_positivity_threshold():
    # lambda_max(P) = 1/2 and -tr A = 4 give the threshold 2, times the 1.1 safety factor
    beta = choose_beta(linear_diag([-1.0, -3.0]), 1.0, 1.0, GRID)
    assert beta == pytest.approx(2.2, rel=1e-9)


def test_choose_beta_trace_positive_pocket():
    def A(t):
        return np.array([[-1.0, 4.0], [0.0, -1.0 + 1.1 * math.exp(-t * t)]])

    sys = SystemDef(n=2, A=A, f=lambda t, x: np.zeros(2), Df=lambda t, x: np.zeros((2, 2)), f_is_zero=True)
    assert choose_beta(sys, 5.0, 0.5, GridSpec(t_range=(-2, 2), t_count=5)) >= 1.5


def test_rho_linear_arithmetic():
    ld = make_linear_density(linear_diag([-1.0]), 1.0, 1.0, GRID, beta=1.0)
    assert rho_linear(ld, 0.0, [2.0]) == pytest.approx(0.5, rel=1e-12)
    assert rho_linear(ld, 0.0, [4.0]) == pytest.approx(0.25 * rho_linear(ld, 0.0, [2.0]), rel=1e-12)
    with pytest.raises(DomainError):
        rho_linear(ld, 0.0, [0.0])


def test_make_linear_density_validation():
    with pytest.raises(ValidationError):
        make_linear_density(linear_diag([-1.0]), 1.0, 1.0, GRID, beta=0.5)
    with pytest.raises(ValidationError):
        make_linear_density(linear_diag([-1.0, -3.0]), 1.0, 1.0, GRID, beta=1.5)


def test_P_symmetric_positive(ld4):
    P = ld4.P(0.3)
    assert np.max(np.abs(P - P.T)) <= 1e-10
    assert np.min(np.linalg.eigvalsh(P)) > 0


@given(st.floats(-3, 3), st.floats(0.1, 4), st.booleans())
def test_linear_divergence_positive_and_consistent(t, r, neg):
    from palmerlin import example4

    ld = make_linear_density(example4(), 1.0, 1.0, [0.0], beta=1.0)
    y = -r if neg else r
    assert rho_linear_divergence(ld, None, t, [y]) > 0


def test_linear_divergence_two_routes_at_origin_probe(ld4):
    closed = rho_linear_divergence(ld4, None, 0.0, [1.0], verify=False)
    fd = rho_linear_divergence_fd(ld4, 0.0, [1.0])
    assert fd == pytest.approx(closed, rel=1e-5)


def test_linear_divergence_time_varying():
    def A(t):
        return np.array([[-1.0 + 0.3 * math.sin(t), 0.5], [0.0, -2.0]])

    sys = SystemDef(n=2, A=A, f=lambda t, x: np.zeros(2), Df=lambda t, x: np.zeros((2, 2)), f_is_zero=True)
    ld = make_linear_density(sys, 1.5, 0.7, GridSpec(t_range=(-3, 3), t_count=13))
    for t, y in [(0.0, [1.0, 0.5]), (1.3, [-0.2, 2.0]), (-2.0, [3.0, -1.0])]:
        assert rho_linear_divergence(ld, sys, t, y) > 0


def test_linear_divergence_inconsistency_detected(ld4):
    from dataclasses import replace

    wrong = replace(ld4, beta=ld4.beta, _cache={})
    wrong.sys = replace(ld4.sys, A=lambda t: np.array([[-1.5]]))
    # P was computed for the wrong A, so the closed form no longer describes it
    wrong._cache[0.0] = (np.array([[0.5]]), np.array([[0.0]]))
    with pytest.raises(InconsistencyError):
        rho_linear_divergence(wrong, None, 0.0, [1.0])


def test_rho_bar_frozen(dp4, frozen):
    assert rho_bar(dp4, None, 0.0, [1.0]) == pytest.approx(frozen["rho_bar_0_1_beta1_P_half"], rel=1e-7)
    with pytest.raises(DomainError):
        rho_bar(dp4, None, 0.0, [0.0])


def test_rho_bar_linear_reduction():
    sys = linear_diag([-1.0, -2.0])
    ld = make_linear_density(sys, 1.0, 1.0, GRID)
    dp = DensityPair(ld, sys, DichotomyBounds(1.0, 1.0, 0.0))
    for t, x in [(0.0, [1.0, 2.0]), (2.0, [-0.3, 0.1])]:
        assert rho_bar(dp, None, t, x) == rho_linear(ld, t, x)
        fd = rho_bar_divergence_check(dp, None, t, x)
        assert fd == pytest.approx(rho_linear_divergence(ld, sys, t, x), rel=1e-4)


@pytest.mark.parametrize("t,x", [(0.0, 1.0), (-1.5, -0.4), (1.0, 2.5)])
def test_rho_bar_divergence_routes(dp4, t, x):
    fd = rho_bar_divergence_check(dp4, None, t, [x])
    tr = rho_bar_divergence_transport(dp4, None, t, [x])
    assert fd > 0
    assert fd == pytest.approx(tr, rel=1e-3)


def test_change_of_variables(dp4, frozen):
    lhs, rhs = change_of_variables_check(dp4, 0.0, 0.2, 3.0)
    assert lhs == pytest.approx(rhs, rel=1e-4)
    assert rhs == pytest.approx(frozen["cov_rhs_0_0p2_3"], rel=1e-8)


def test_integrability_linear_closed_form():
    sys = linear_diag([-1.0])
    ld = make_linear_density(sys, 1.0, 1.0, GRID, beta=1.0)
    dp = DensityPair(ld, sys, DichotomyBounds(1.0, 1.0, 0.0))
    r = integrability_check(dp, None, 0.0, 1.0, 2.0, levels=8)
    assert r.passed
    # both sides of the line: 2 * 2 (1 - 1/R)
    for R, I in zip([2.0 * 2 ** k for k in range(9)], r.partial):
        assert I == pytest.approx(4 * (1 - 1 / R), rel=1e-9)


def test_integrability_boundary_flagged():
    sys = linear_diag([-1.0, -1.0])
    ld = make_linear_density(sys, 1.0, 1.0, GRID, beta=1.0, validate=False)
    dp = DensityPair(ld, sys, DichotomyBounds(1.0, 1.0, 0.0))
    r = integrability_check(dp, None, 0.0, 0.5)
    assert not r.passed
    assert r.expected_ratio == 1.0
