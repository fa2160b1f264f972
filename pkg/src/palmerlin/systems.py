"""Built-in test systems with closed-form (or one-quadrature) reference values.

``example4`` is the scalar equation x' = -a x + h(t) arctan(x) with the
Gaussian envelope h(r) = c exp(-r^2); ``linear_diag`` is a constant diagonal
linear system; ``corollary_example`` feeds the same scalar equation through
the g-only split A(t) = Dg(t, 0), f = g - Dg(t, 0) x.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate as spi
from scipy.special import erfc

from .errors import ConfigError, ValidationError
from .ode import IntegratorConfig, integrate_flow
from .system import GSystem, SystemDef, check_derivatives

__all__ = [
    "example4",
    "linear_diag",
    "corollary_example_g",
    "corollary_example",
    "PRESETS",
    "build_preset",
]

_PROBE_TS = (-2.0, -0.3, 0.0, 0.7, 2.5)
_PROBE_XS = ((-3.0,), (-0.4,), (0.0,), (0.9,), (4.0,))

# long enough that the Gaussian envelope beyond it is far below double precision
_ORACLE_WINDOW = 60.0


def _gauss(c: float) -> Callable[[float], float]:
    return lambda r: c * math.exp(-r * r)


def _gauss_tail(c: float) -> Callable[[float], float]:
    # int_{-inf}^{s} c exp(-r^2) dr
    return lambda s: c * math.sqrt(math.pi) / 2.0 * float(erfc(-s))


def _scalar_flow(sys, t: float, x: float, s: float, cfg: IntegratorConfig):
    traj = integrate_flow(sys, t, [x], s, cfg)
    return lambda u: float(traj(u)[0])


def _int_df(sys, t: float, x: float, s: float, cfg: IntegratorConfig) -> float:
    """int_s^t Df(u, phi(u, t, x)) du by adaptive quadrature on the dense flow."""
    if s == t:
        return 0.0
    phi = _scalar_flow(sys, t, x, s, cfg)
    h = sys.params["h"]

    def integrand(u):
        p = phi(u)
        return h(u) / (1.0 + p * p)

    lo, hi = min(s, t), max(s, t)
    # Gaussian bump sits near 0; split there for quad's benefit
    pts = [p for p in (-3.0, 0.0, 3.0) if lo < p < hi]
    val, _ = spi.quad(integrand, lo, hi, points=pts or None, epsabs=1e-14, epsrel=1e-12, limit=400)
    return val if s <= t else -val


def example4(a: float = 1.0, c: float = 0.2, validate: bool = True) -> SystemDef:
    """Scalar system x' = -a x + c exp(-t^2) arctan(x)."""
    a = float(a)
    c = float(c)
    if not a > 0:
        raise ValidationError(f"example4 needs a > 0, got a={a}")
    if c < 0:
        raise ValidationError(f"example4 needs c >= 0, got c={c}")
    if 4 * c > a:
        raise ValidationError(f"example4 needs 4c <= a for (H4); got 4*{c} > {a}")
    h = _gauss(c)
    Amat = np.array([[-a]])

    def A(t):
        return Amat

    def f(t, x):
        return h(t) * np.arctan(x)

    def Df(t, x):
        return np.array([[h(t) / (1.0 + x[0] * x[0])]])

    def D2f(t, x):
        return np.array([[[-2.0 * h(t) * x[0] / (1.0 + x[0] * x[0]) ** 2]]])

    sys = SystemDef(
        n=1, A=A, f=f, Df=Df, D2f=D2f, h5=True, f_is_zero=(c == 0.0),
        df_tail=_gauss_tail(c), name="example4", params={"a": a, "c": c, "h": h},
    )
    ocfg = IntegratorConfig(rtol=1e-12, atol=1e-14)

    def Psi(t, s):
        return np.array([[math.exp(-a * (t - s))]])

    def Z(s, t, x):
        return np.array([[math.exp(-_int_df(sys, t, float(np.ravel(x)[0]), s, ocfg))]])

    def dphi(s, t, x):
        return np.array([[math.exp(a * (t - s) - _int_df(sys, t, float(np.ravel(x)[0]), s, ocfg))]])

    def DH(t, x):
        return Z(t - _ORACLE_WINDOW, t, x)

    def F(r, xi):
        p = float(integrate_flow(sys, 0.0, np.ravel(xi), r, ocfg).y_end[0])
        return np.array([[h(r) / (1.0 + p * p)]])

    object.__setattr__(sys, "oracle", {"Psi": Psi, "Z": Z, "dphi": dphi, "DH": DH, "F": F})
    if validate:
        check_derivatives(sys, _PROBE_TS, _PROBE_XS)
    return sys


def linear_diag(d: Sequence[float]) -> SystemDef:
    """Constant diagonal linear system with f identically zero."""
    d = np.asarray(d, dtype=float).ravel()
    if d.size == 0:
        raise ValidationError("linear_diag needs at least one diagonal entry")
    n = d.size
    Amat = np.diag(d)
    zeros_n = np.zeros(n)
    zeros_nn = np.zeros((n, n))
    zeros_nnn = np.zeros((n, n, n))

    def Psi(t, s):
        return np.diag(np.exp(d * (t - s)))

    oracle = {
        "Psi": Psi,
        "Z": lambda s, t, x: np.eye(n),
        "dphi": lambda s, t, x: Psi(s, t),
        "DH": lambda t, x: np.eye(n),
        "F": lambda r, xi: zeros_nn.copy(),
    }
    return SystemDef(
        n=n, A=lambda t: Amat, f=lambda t, x: zeros_n.copy(), Df=lambda t, x: zeros_nn.copy(),
        D2f=lambda t, x: zeros_nnn.copy(), h5=True, f_is_zero=True, df_tail=lambda s: 0.0,
        oracle=oracle, name="linear_diag", params={"d": d.tolist()},
    )


def corollary_example_g(a: float = 1.0, c: float = 0.2) -> GSystem:
    """g(t, x) = -a x + c exp(-t^2) arctan(x) as a g-only definition."""
    a = float(a)
    c = float(c)
    if not a > 0 or c < 0:
        raise ValidationError(f"corollary_example needs a > 0 and c >= 0, got a={a}, c={c}")
    h = _gauss(c)

    def g(t, x):
        return -a * x + h(t) * np.arctan(x)

    def Dg(t, x):
        return np.array([[-a + h(t) / (1.0 + x[0] * x[0])]])

    def D2g(t, x):
        return np.array([[[-2.0 * h(t) * x[0] / (1.0 + x[0] * x[0]) ** 2]]])

    # |Df_split| = h x^2 / (1 + x^2) <= h, so the Gaussian tail bounds it too
    return GSystem(n=1, g=g, Dg=Dg, D2g=D2g, df_tail=_gauss_tail(c), name="corollary_example",
                   params={"a": a, "c": c, "h": h})


def corollary_example(a: float = 1.0, c: float = 0.2) -> SystemDef:
    """The split system A(t) = -a + h(t), f = h(t)(arctan x - x)."""
    from .hypotheses import corollary_split

    sys = corollary_split(corollary_example_g(a, c))
    check_derivatives(sys, _PROBE_TS, _PROBE_XS)
    return sys


PRESETS: Mapping[str, Callable[..., SystemDef]] = {
    "example4": example4,
    "linear_diag": linear_diag,
    "corollary_example": corollary_example,
}


def build_preset(name: str, params: Mapping[str, object] | None = None) -> SystemDef:
    """Instantiate a named preset; unknown names and bad parameters raise ConfigError."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    try:
        return PRESETS[name](**dict(params or {}))
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"invalid parameters for preset {name!r}: {exc}") from exc
