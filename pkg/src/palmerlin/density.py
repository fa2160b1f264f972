"""Density functions for the linear system and their pushforward through H.

The linear density is rho(t, y) = (y^T P(t) y)^(-beta) with the Lyapunov
matrix P(t) = int_t^{t+T} Psi(s, t)^T Psi(s, t) ds. Along solutions of the
linear system V = y^T P y satisfies

    dV/dt = -|y|^2 + |Psi(t+T, t) y|^2,

so the divergence expression has the closed form
rho * (beta (|y|^2 - |Psi_T y|^2) / V + tr A(t)).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conjugacy import DichotomyBounds, H_eval, H_jacobian, H_with_jacobian, TruncationConfig
from .errors import CapabilityError, DomainError, InconsistencyError, ValidationError
from .ode import IntegratorConfig, integrate
from .system import SystemDef

__all__ = [
    "LinearDensity",
    "DensityPair",
    "IntegrabilityResult",
    "lyapunov_P",
    "choose_beta",
    "make_linear_density",
    "rho_linear",
    "rho_linear_divergence",
    "rho_linear_divergence_fd",
    "rho_bar",
    "rho_bar_divergence_check",
    "rho_bar_divergence_transport",
    "integrability_check",
    "change_of_variables_check",
    "DENSITY_CFG",
]

# P(t) feeds finite differences in t; keep it well below the 1e-5 agreement target
DENSITY_CFG = IntegratorConfig(rtol=1e-12, atol=1e-14)
_CACHE_CAP = 4096


def _lyap_rhs(sys: SystemDef):
    n = sys.n
    nn = n * n

    def rhs(s, y):
        Psi = y[:nn].reshape(n, n)
        out = np.empty_like(y)
        out[:nn] = (sys.A(s) @ Psi).ravel()
        out[nn:] = (Psi.T @ Psi).ravel()
        return out

    return rhs


def lyapunov_P(sys: SystemDef, t: float, horizon_T: float, cfg: Optional[IntegratorConfig] = None,
               K: float = 1.0, alpha: Optional[float] = None):
    """P(t) by one forward matrix integration over [t, t + T].

    Returns ``(P, Psi_T, tail)`` where ``Psi_T = Psi(t + T, t)`` and ``tail``
    bounds the discarded part K^2 exp(-2 alpha T) / (2 alpha) (``inf`` when no
    decay rate is given).
    """
    if not horizon_T > 0:
        raise ValueError("horizon_T must be positive")
    n = sys.n
    nn = n * n
    y0 = np.concatenate([np.eye(n).ravel(), np.zeros(nn)])
    traj = integrate(_lyap_rhs(sys), t, y0, t + horizon_T, cfg or DENSITY_CFG)
    Psi_T = traj.y_end[:nn].reshape(n, n).copy()
    P = traj.y_end[nn:].reshape(n, n)
    P = 0.5 * (P + P.T)
    tail = math.inf if alpha is None else K * K * math.exp(-2 * alpha * horizon_T) / (2 * alpha)
    return P, Psi_T, tail


def default_horizon(K: float, alpha: float, tol: float = 1e-14, minimum: float = 20.0) -> float:
    """Smallest T >= minimum whose discarded tail is below tol."""
    return max(minimum, math.log(K * K / (2 * alpha * tol)) / (2 * alpha))


@dataclass(eq=False)
class LinearDensity:
    """rho(t, y) = (y^T P(t) y)^(-beta) for the linear part of ``sys``.

    P(t) gets its own quadrature for every requested t; the cache is keyed on
    the exact float t, so cached and fresh values are identical.
    """

    sys: SystemDef
    beta: float
    horizon_T: float
    tail_bound: float
    cfg: IntegratorConfig = DENSITY_CFG
    beta_threshold: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")

    def _entry(self, t: float):
        t = float(t)
        with self._lock:
            hit = self._cache.get(t)
        if hit is None:
            P, Psi_T, _ = lyapunov_P(self.sys, t, self.horizon_T, self.cfg)
            if np.min(np.linalg.eigvalsh(P)) <= 0:
                raise DomainError(f"P({t}) is not positive definite", t=t)
            hit = (P, Psi_T)
            with self._lock:
                if len(self._cache) >= _CACHE_CAP:
                    self._cache.clear()
                self._cache.setdefault(t, hit)
        return hit

    def P(self, t: float) -> np.ndarray:
        return self._entry(t)[0]

    def Psi_T(self, t: float) -> np.ndarray:
        return self._entry(t)[1]

    def Pdot(self, t: float) -> np.ndarray:
        """dP/dt = -I - A^T P - P A + Psi_T^T Psi_T."""
        P, Psi_T = self._entry(t)
        A = self.sys.A(t)
        return -np.eye(self.sys.n) - A.T @ P - P @ A + Psi_T.T @ Psi_T

    @property
    def integrability_margin(self) -> float:
        return 2 * self.beta - self.sys.n

    @property
    def positivity_margin(self) -> float:
        return self.beta - self.beta_threshold


def _positivity_threshold(sys: SystemDef, ts: Sequence[float], horizon_T: float, cfg) -> float:
    """sup_t lambda_max(P) max(0, -tr A) / (1 - ||Psi_T||_2^2).

    beta above this makes beta (|y|^2 - |Psi_T y|^2) / V + tr A > 0 for all y.
    """
    worst = 0.0
    for t in ts:
        P, Psi_T, _ = lyapunov_P(sys, t, horizon_T, cfg)
        shrink = 1.0 - np.linalg.norm(Psi_T, 2) ** 2
        if not shrink > 0:
            raise DomainError(f"||Psi(t+T, t)|| >= 1 at t={t}; increase horizon_T", t=t)
        val = np.max(np.linalg.eigvalsh(P)) * max(0.0, -float(np.trace(sys.A(t)))) / shrink
        if not math.isfinite(val):
            raise DomainError(f"non-finite positivity threshold at t={t}", t=t)
        worst = max(worst, val)
    return worst


def choose_beta(sys: SystemDef, K: float, alpha: float, grid, n: Optional[int] = None,
                horizon_T: Optional[float] = None, cfg: Optional[IntegratorConfig] = None,
                safety: float = 1.1) -> float:
    """beta = max((n + 1) / 2, safety * positivity threshold over the grid's t values."""
    n = sys.n if n is None else n
    T = default_horizon(K, alpha) if horizon_T is None else horizon_T
    ts = grid.ts if hasattr(grid, "ts") else np.asarray(grid, dtype=float)
    thr = _positivity_threshold(sys, ts, T, cfg or DENSITY_CFG)
    return max((n + 1) / 2.0, safety * thr)


def make_linear_density(sys: SystemDef, K: float, alpha: float, grid, beta: Optional[float] = None,
                        horizon_T: Optional[float] = None, cfg: Optional[IntegratorConfig] = None,
                        validate: bool = True) -> LinearDensity:
    """Build rho for the linear part; ``beta`` defaults to :func:`choose_beta`.

    With ``validate`` an explicit ``beta`` must satisfy 2 beta > n and exceed
    the positivity threshold; ``validate=False`` admits boundary probes.
    """
    cfg = cfg or DENSITY_CFG
    T = default_horizon(K, alpha) if horizon_T is None else horizon_T
    ts = grid.ts if hasattr(grid, "ts") else np.asarray(grid, dtype=float)
    thr = _positivity_threshold(sys, ts, T, cfg)
    if beta is None:
        beta = max((sys.n + 1) / 2.0, 1.1 * thr)
    elif validate:
        if not 2 * beta > sys.n:
            raise ValidationError(f"beta={beta} violates integrability 2 beta > n={sys.n}")
        if not beta > thr:
            raise ValidationError(f"beta={beta} does not exceed the positivity threshold {thr:.6g}")
    tail = K * K * math.exp(-2 * alpha * T) / (2 * alpha)
    return LinearDensity(sys, float(beta), T, tail, cfg, thr)


def rho_linear(ld: LinearDensity, t: float, y) -> float:
    y = np.asarray(y, dtype=float).reshape(ld.sys.n)
    if not np.any(y):
        raise DomainError("density is undefined at the origin", t=t, x=y)
    return float(y @ ld.P(t) @ y) ** (-ld.beta)


def _closed_divergence(ld: LinearDensity, t: float, y: np.ndarray) -> float:
    P, Psi_T = ld._entry(t)
    V = float(y @ P @ y)
    rho = V ** (-ld.beta)
    py = Psi_T @ y
    return rho * (ld.beta * (float(y @ y) - float(py @ py)) / V + float(np.trace(ld.sys.A(t))))


def _richardson(D, h):
    return (4.0 * D(h / 2.0) - D(h)) / 3.0


def rho_linear_divergence_fd(ld: LinearDensity, t: float, y, fd_step: float = 1e-4) -> float:
    """d rho / dt + div(rho A y) by central differences (Richardson once)."""
    n = ld.sys.n
    y = np.asarray(y, dtype=float).reshape(n)
    A = ld.sys.A(t)

    def D(h_rel):
        ht = h_rel * max(1.0, abs(t))
        val = (rho_linear(ld, t + ht, y) - rho_linear(ld, t - ht, y)) / (2 * ht)
        for i in range(n):
            hy = h_rel * max(1.0, abs(y[i]))
            e = np.zeros(n)
            e[i] = hy
            up = rho_linear(ld, t, y + e) * (A @ (y + e))[i]
            dn = rho_linear(ld, t, y - e) * (A @ (y - e))[i]
            val += (up - dn) / (2 * hy)
        return val

    return _richardson(D, fd_step)


def rho_linear_divergence(ld: LinearDensity, sys: Optional[SystemDef], t: float, y, rtol: float = 1e-5,
                          fd_step: float = 1e-4, verify: bool = True) -> float:
    """Closed-form divergence, cross-checked against finite differences when ``verify``."""
    if sys is not None and sys is not ld.sys:
        raise ValueError("density was built for a different system")
    n = ld.sys.n
    y = np.asarray(y, dtype=float).reshape(n)
    if not np.any(y):
        raise DomainError("density is undefined at the origin", t=t, x=y)
    closed = _closed_divergence(ld, t, y)
    if verify:
        fd = rho_linear_divergence_fd(ld, t, y, fd_step)
        gap = abs(closed - fd) / max(abs(closed), 1e-300)
        if gap > rtol:
            raise InconsistencyError(
                f"closed-form divergence {closed:.10g} and finite differences {fd:.10g} differ (rel {gap:.2e})")
    return closed


@dataclass(eq=False)
class DensityPair:
    """A linear density and its pushforward rho_bar = rho(t, H(t, x)) det DH(t, x)."""

    linear: LinearDensity
    sys: SystemDef
    bounds: DichotomyBounds
    trunc: TruncationConfig = field(default_factory=TruncationConfig)
    cfg: IntegratorConfig = field(default_factory=IntegratorConfig)

    def H(self, t: float, x) -> np.ndarray:
        return H_eval(self.sys, t, x, self.bounds, self.trunc, self.cfg).value

    def DH(self, t: float, x) -> np.ndarray:
        return H_jacobian(self.sys, t, x, self.trunc, self.cfg)

    def pushforward(self, t: float, x) -> float:
        return rho_bar(self, self.sys, t, x)


def rho_bar(dp: DensityPair, sys: Optional[SystemDef], t: float, x, trunc=None, cfg=None) -> float:
    sys = dp.sys if sys is None else sys
    x = np.asarray(x, dtype=float).reshape(sys.n)
    if not np.any(x):
        raise DomainError("rho_bar is undefined at x = 0", t=t, x=x)
    trunc = trunc or dp.trunc
    cfg = cfg or dp.cfg
    hr, J = H_with_jacobian(sys, t, x, dp.bounds, trunc, cfg)
    return rho_linear(dp.linear, t, hr.value) * float(np.linalg.det(J))


def rho_bar_divergence_check(dp: DensityPair, sys: Optional[SystemDef], t: float, x,
                             fd_step: float = 1e-4) -> float:
    """d rho_bar / dt + div(rho_bar g) by central differences (Richardson once)."""
    sys = dp.sys if sys is None else sys
    n = sys.n
    x = np.asarray(x, dtype=float).reshape(n)

    def D(h_rel):
        ht = h_rel * max(1.0, abs(t))
        val = (rho_bar(dp, sys, t + ht, x) - rho_bar(dp, sys, t - ht, x)) / (2 * ht)
        for i in range(n):
            hx = h_rel * max(1.0, abs(x[i]))
            e = np.zeros(n)
            e[i] = hx
            up = rho_bar(dp, sys, t, x + e) * sys.g(t, x + e)[i]
            dn = rho_bar(dp, sys, t, x - e) * sys.g(t, x - e)[i]
            val += (up - dn) / (2 * hx)
        return val

    return _richardson(D, fd_step)


def rho_bar_divergence_transport(dp: DensityPair, sys: Optional[SystemDef], t: float, x) -> float:
    """Divergence of rho_bar via the conjugacy: (linear divergence at H(t, x)) * det DH(t, x)."""
    sys = dp.sys if sys is None else sys
    x = np.asarray(x, dtype=float).reshape(sys.n)
    hr, J = H_with_jacobian(sys, t, x, dp.bounds, dp.trunc, dp.cfg)
    return _closed_divergence(dp.linear, t, hr.value) * float(np.linalg.det(J))


@dataclass(frozen=True)
class IntegrabilityResult:
    radii: tuple
    partial: tuple
    ratios: tuple
    expected_ratio: float
    tail_estimate: float
    passed: bool


def _gl(nodes: int):
    return np.polynomial.legendre.leggauss(nodes)


def _shell_integral(func, n: int, r0: float, r1: float, nodes: int) -> float:
    """Integral of func over r0 <= |x| <= r1 (Euclidean), n <= 3."""
    xg, wg = _gl(nodes)
    # log-radial substitution keeps the power-law integrand well resolved
    u = 0.5 * (math.log(r1) - math.log(r0)) * xg + 0.5 * (math.log(r1) + math.log(r0))
    wr = 0.5 * (math.log(r1) - math.log(r0)) * wg
    rs = np.exp(u)
    total = 0.0
    if n == 1:
        for r, w in zip(rs, wr):
            total += w * r * (func(np.array([r])) + func(np.array([-r])))
        return total
    if n == 2:
        m = 4 * nodes
        th = 2 * math.pi * np.arange(m) / m
        for r, w in zip(rs, wr):
            ring = sum(func(r * np.array([math.cos(a), math.sin(a)])) for a in th) * 2 * math.pi / m
            total += w * r * r * ring
        return total
    if n == 3:
        m = 2 * nodes
        ct, wct = _gl(nodes)
        ph = 2 * math.pi * np.arange(m) / m
        for r, w in zip(rs, wr):
            sph = 0.0
            for c, wc in zip(ct, wct):
                s = math.sqrt(1 - c * c)
                sph += wc * sum(func(r * np.array([s * math.cos(p), s * math.sin(p), c])) for p in ph)
            total += w * r ** 3 * sph * 2 * math.pi / m
        return total
    raise CapabilityError(f"annulus quadrature implemented for n <= 3, got n={n}")


def integrability_check(dp: DensityPair, sys: Optional[SystemDef], t: float, ball_radius: float,
                        outer_radius: Optional[float] = None, levels: int = 6, nodes: int = 12,
                        ratio_tol: float = 0.1, use_linear: bool = False) -> IntegrabilityResult:
    """Partial integrals of rho_bar(t, .) over ball_radius <= |x| <= R_k, R_k = R_0 2^k.

    Dyadic shell increments of an |x|^(-2 beta) tail shrink by 2^(n - 2 beta);
    the check passes when the observed ratios match that and are below one,
    so that the partial integrals are Cauchy. ``use_linear`` integrates rho
    itself instead of rho_bar.
    """
    sys = dp.sys if sys is None else sys
    n = sys.n
    r0 = float(ball_radius)
    R0 = float(outer_radius) if outer_radius is not None else 2.0 * r0
    if not R0 > r0 > 0:
        raise ValueError("need 0 < ball_radius < outer_radius")
    if use_linear:
        func = lambda x: rho_linear(dp.linear, t, x)  # noqa: E731
    else:
        func = lambda x: rho_bar(dp, sys, t, x)  # noqa: E731
    radii = [R0 * 2.0 ** k for k in range(levels + 1)]
    partial = [_shell_integral(func, n, r0, R0, nodes)]
    incs = []
    for k in range(levels):
        inc = _shell_integral(func, n, radii[k], radii[k + 1], nodes)
        incs.append(inc)
        partial.append(partial[-1] + inc)
    expected = 2.0 ** (n - 2 * dp.linear.beta)
    ratios = [incs[k + 1] / incs[k] for k in range(levels - 1)]
    q = ratios[-1]
    tail = incs[-1] * q / (1 - q) if q < 1 else math.inf
    passed = bool(expected < 1 and q < 1 and abs(q - expected) <= ratio_tol)
    return IntegrabilityResult(tuple(radii), tuple(partial), tuple(ratios), expected, tail, passed)


def change_of_variables_check(dp: DensityPair, t: float, a: float, b: float, nodes: int = 24):
    """For n = 1: (int_a^b rho_bar dx, int_{H(a)}^{H(b)} rho dy), both by Gauss-Legendre.

    The interval must not contain 0.
    """
    if dp.sys.n != 1:
        raise CapabilityError("change-of-variables check is one-dimensional")
    if a * b <= 0 or not b > a:
        raise ValueError("need an interval a < b not containing 0")
    xg, wg = _gl(nodes)

    def gl(func, lo, hi):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        return half * sum(w * func(mid + half * u) for u, w in zip(xg, wg))

    lhs = gl(lambda x: rho_bar(dp, None, t, [x]), a, b)
    ha = float(dp.H(t, [a])[0])
    hb = float(dp.H(t, [b])[0])
    rhs = gl(lambda y: rho_linear(dp.linear, t, [y]), ha, hb)
    return lhs, rhs
