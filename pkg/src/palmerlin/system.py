"""The quasilinear system x' = A(t)x + f(t, x) and its derivative callbacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError

__all__ = ["SystemDef", "GSystem", "check_derivatives"]

Matrix = np.ndarray


@dataclass(frozen=True, eq=False)
class SystemDef:
    """A linear part ``A(t)`` plus a perturbation ``f(t, x)``.

    Parameters
    ----------
    n : int
        State dimension. Scalars are handled as 1x1 matrices throughout.
    A, f, Df, D2f : callables
        ``A(t) -> (n, n)``, ``f(t, x) -> (n,)``, ``Df(t, x) -> (n, n)`` and
        ``D2f(t, x) -> (n, n, n)`` with ``D2f[i, j, k] = d2 f_i / dx_j dx_k``.
    h5 : bool
        Declares ``f(t, 0) = 0``; checked on probes by :func:`check_derivatives`.
    f_is_zero : bool
        Declares ``f == 0`` so conjugacy routines can skip work.
    df_tail : callable, optional
        ``df_tail(s)`` bounds ``int_{-inf}^{s} sup_x ||Df(r, x)|| dr``. Used for
        certified truncation of (D1)-type integrals.
    oracle : mapping
        Closed-form reference functions for test systems (``Psi``, ``Z``, ...).
    """

    n: int
    A: Callable[[float], Matrix]
    f: Callable[[float, np.ndarray], np.ndarray]
    Df: Callable[[float, np.ndarray], Matrix]
    D2f: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    h5: bool = False
    f_is_zero: bool = False
    df_tail: Optional[Callable[[float], float]] = None
    oracle: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"state dimension must be a positive integer, got {self.n}")

    def g(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.A(t) @ x + self.f(t, x)

    def Dg(self, t: float, x: np.ndarray) -> Matrix:
        return self.A(t) + self.Df(t, x)


@dataclass(frozen=True, eq=False)
class GSystem:
    """A fully nonlinear system x' = g(t, x) given only through g and its derivatives."""

    n: int
    g: Callable[[float, np.ndarray], np.ndarray]
    Dg: Callable[[float, np.ndarray], Matrix]
    D2g: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    df_tail: Optional[Callable[[float], float]] = None
    oracle: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom-g"
    params: Mapping[str, object] = field(default_factory=dict)


def _rel_gap(exact, approx) -> float:
    exact = np.asarray(exact, dtype=float)
    approx = np.asarray(approx, dtype=float)
    scale = max(np.max(np.abs(exact)), np.max(np.abs(approx)), 1e-8)
    return float(np.max(np.abs(exact - approx)) / scale)


def check_derivatives(sys: SystemDef, ts: Sequence[float], xs: Sequence, rtol: float = 1e-4) -> float:
    """Compare Df and D2f with central differences on a probe grid.

    Returns the worst relative gap and raises :class:`ValidationError` when it
    exceeds ``rtol`` or when ``h5`` is declared but ``f(t, 0) != 0``.
    """
    n = sys.n
    worst = 0.0
    for t in ts:
        if sys.h5:
            f0 = sys.f(t, np.zeros(n))
            if np.max(np.abs(f0)) > 1e-12:
                raise ValidationError(f"h5 declared but f({t}, 0) = {f0}")
        for x in xs:
            x = np.asarray(x, dtype=float).reshape(n)
            jac = np.asarray(sys.Df(t, x), dtype=float).reshape(n, n)
            fd = np.empty((n, n))
            for j in range(n):
                eps = 1e-6 * max(1.0, abs(x[j]))
                e = np.zeros(n)
                e[j] = eps
                fd[:, j] = (sys.f(t, x + e) - sys.f(t, x - e)) / (2 * eps)
            worst = max(worst, _rel_gap(jac, fd))
            if sys.D2f is not None:
                hess = np.asarray(sys.D2f(t, x), dtype=float).reshape(n, n, n)
                fd2 = np.empty((n, n, n))
                for k in range(n):
                    eps = 1e-5 * max(1.0, abs(x[k]))
                    e = np.zeros(n)
                    e[k] = eps
                    fd2[:, :, k] = (sys.Df(t, x + e) - sys.Df(t, x - e)) / (2 * eps)
                worst = max(worst, _rel_gap(hess, fd2))
    if worst > rtol:
        raise ValidationError(f"derivative callbacks disagree with finite differences (rel gap {worst:.2e})")
    return worst
