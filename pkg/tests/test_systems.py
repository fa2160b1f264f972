import math

import numpy as np
import pytest

from palmerlin import build_preset, check_derivatives, corollary_example, example4, linear_diag
from palmerlin.errors import ConfigError, ValidationError
from palmerlin.system import SystemDef


def test_example4_shapes_and_values(ex4):
    assert ex4.n == 1
    assert ex4.A(0.3)[0, 0] == -1.0
    assert ex4.f(0.0, np.array([1.0]))[0] == pytest.approx(0.2 * math.pi / 4)
    assert ex4.Df(0.0, np.array([0.0]))[0, 0] == pytest.approx(0.2)
    assert ex4.D2f(0.0, np.array([1.0]))[0, 0, 0] == pytest.approx(-2 * 0.2 * 1 / 4)


@pytest.mark.parametrize("a,c", [(1.0, 0.3), (0.0, 0.1), (1.0, -0.1)])
def test_example4_validation(a, c):
    with pytest.raises(ValidationError):
        example4(a, c)


def test_example4_c_zero_is_linear():
    sys = example4(1.0, 0.0)
    assert sys.f_is_zero
    assert sys.f(0.0, np.array([3.0]))[0] == 0.0


def test_example4_oracle_psi(ex4):
    assert ex4.oracle["Psi"](2.0, 0.5)[0, 0] == pytest.approx(math.exp(-1.5))


def test_linear_diag_oracles():
    sys = linear_diag([-1.0, -2.0])
    assert np.allclose(sys.oracle["Psi"](1.0, 0.0), np.diag([math.exp(-1), math.exp(-2)]))
    assert np.array_equal(sys.oracle["DH"](0.0, np.ones(2)), np.eye(2))


def test_linear_diag_empty():
    with pytest.raises(ValidationError):
        linear_diag([])


def test_corollary_example_split():
    sys = corollary_example(1.0, 0.2)
    for t in (-1.0, 0.0, 0.7):
        assert sys.A(t)[0, 0] == pytest.approx(-1.0 + 0.2 * math.exp(-t * t))
        assert sys.f(t, np.zeros(1))[0] == 0.0
        assert sys.Df(t, np.zeros(1))[0, 0] == 0.0
        x = np.array([1.3])
        assert sys.f(t, x)[0] == pytest.approx(0.2 * math.exp(-t * t) * (math.atan(1.3) - 1.3))


def test_check_derivatives_catches_wrong_jacobian():
    bad = SystemDef(n=1, A=lambda t: np.array([[-1.0]]), f=lambda t, x: np.sin(x),
                    Df=lambda t, x: np.array([[1.0]]))
    with pytest.raises(ValidationError):
        check_derivatives(bad, [0.0], [[0.5]])


def test_check_derivatives_h5_probe():
    bad = SystemDef(n=1, A=lambda t: np.array([[-1.0]]), f=lambda t, x: np.ones(1),
                    Df=lambda t, x: np.zeros((1, 1)), h5=True)
    with pytest.raises(ValidationError):
        check_derivatives(bad, [0.0], [[0.5]])


def test_build_preset():
    assert build_preset("example4", {"a": 2.0, "c": 0.1}).params["a"] == 2.0
    with pytest.raises(ConfigError):
        build_preset("nope")
    with pytest.raises(ConfigError):
        build_preset("example4", {"a": 1.0, "c": 0.3})
    with pytest.raises(ConfigError):
        build_preset("example4", {"bogus": 1})


def test_gaussian_envelope_integrable():
    # h(r) exp(-a r) over growing windows converges for the Gaussian envelope
    from scipy.integrate import quad

    vals = [quad(lambda r: 0.2 * math.exp(-r * r - r), -L, L)[0] for L in (5, 10, 20)]
    assert abs(vals[-1] - vals[-2]) < 1e-12
    assert vals[-1] == pytest.approx(0.2 * math.sqrt(math.pi) * math.exp(0.25), rel=1e-10)
