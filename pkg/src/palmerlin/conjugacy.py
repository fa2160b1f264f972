"""Palmer's conjugacy H, its inverse L and its first two derivatives.

H(tau, nu) = nu - int_{-inf}^{tau} Psi(tau, s) f(s, phi(s, tau, nu)) ds.

The improper integral is truncated at the point s0 where the dichotomy tail
bound K mu exp(-alpha (tau - s0)) / alpha drops below ``tail_tol``; the
flow, Psi(tau, s) and the running integral are co-integrated backward in one
pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError, InversionError, TruncationError
from .ode import IntegratorConfig, eval_dense, inf_norm, integrate, integrate_flow, transition_matrices
from .system import SystemDef
from .variational import DEFAULT_WINDOW, z_backward

__all__ = [
    "TruncationConfig",
    "DichotomyBounds",
    "ConjugacyResult",
    "truncation_point",
    "H_eval",
    "H_on_trajectory",
    "H_jacobian",
    "H_with_jacobian",
    "H_hessian",
    "L_eval",
    "conjugacy_defect",
    "conjugacy_defects",
]


@dataclass(frozen=True)
class TruncationConfig:
    tail_tol: float = 1e-8
    s_min_cap: float = -200.0
    quad_rtol: float = 1e-9
    window: float = DEFAULT_WINDOW

    def __post_init__(self):
        if not self.tail_tol > 0:
            raise ValueError("tail_tol must be positive")
        if not math.isfinite(self.s_min_cap):
            raise ValueError("s_min_cap must be finite")


@dataclass(frozen=True)
class DichotomyBounds:
    """Constants of (H1)-(H3): ||Psi(t,s)|| <= K exp(-alpha(t-s)), ||f|| <= mu, Lip(f) <= gamma."""

    K: float
    alpha: float
    mu: float
    gamma: Optional[float] = None

    @property
    def h4_ok(self) -> Optional[bool]:
        if self.gamma is None:
            return None
        return self.gamma <= self.alpha / (4 * self.K)

    @property
    def palmer_bound(self) -> float:
        """4 K mu / alpha, the uniform bound on |H(t, x) - x|."""
        return 4 * self.K * self.mu / self.alpha


@dataclass(frozen=True)
class ConjugacyResult:
    value: np.ndarray
    truncation_point: float
    tail_bound: float
    certified: bool = True
    diagnostics: dict = field(default_factory=dict)


def truncation_point(tau: float, bounds: DichotomyBounds, tail_tol: float) -> tuple[float, float]:
    """Smallest lag with K mu exp(-alpha lag)/alpha <= tail_tol; returns (s0, tail bound)."""
    K, alpha, mu = bounds.K, bounds.alpha, bounds.mu
    if mu == 0:
        return float(tau), 0.0
    lag = max(0.0, math.log(K * mu / (alpha * tail_tol)) / alpha)
    s0 = tau - lag
    return s0, K * mu * math.exp(-alpha * lag) / alpha


def _h_rhs(sys: SystemDef):
    n = sys.n
    nn = n * n

    def rhs(s, y):
        x = y[:n]
        M = y[n:n + nn].reshape(n, n)
        A = sys.A(s)
        fx = sys.f(s, x)
        out = np.empty_like(y)
        out[:n] = A @ x + fx
        out[n:n + nn] = -(M @ A).ravel()
        out[n + nn:] = -(M @ fx)
        return out

    return rhs


def H_eval(sys: SystemDef, tau: float, nu, bounds: DichotomyBounds, trunc: TruncationConfig = TruncationConfig(),
           cfg: Optional[IntegratorConfig] = None) -> ConjugacyResult:
    """Evaluate H(tau, nu) with a certified truncation tail."""
    n = sys.n
    nu = np.asarray(nu, dtype=float).reshape(n)
    certified = bounds.h4_ok is not False
    if sys.f_is_zero:
        return ConjugacyResult(nu.copy(), float(tau), 0.0, certified, {"nodes": 0})
    s0, tail = truncation_point(tau, bounds, trunc.tail_tol)
    capped = s0 < trunc.s_min_cap
    if capped:
        s0 = trunc.s_min_cap
        tail = bounds.K * bounds.mu * math.exp(-bounds.alpha * (tau - s0)) / bounds.alpha
    cfg = cfg or IntegratorConfig()
    if trunc.quad_rtol < cfg.rtol:
        cfg = IntegratorConfig(trunc.quad_rtol, cfg.atol, cfg.max_step, cfg.max_steps)
    y0 = np.concatenate([nu, np.eye(n).ravel(), np.zeros(n)])
    traj = integrate(_h_rhs(sys), tau, y0, s0, cfg)
    value = nu - traj.y_end[n + n * n:]
    res = ConjugacyResult(value, float(s0), float(tail), certified,
                          {"nodes": traj.stats.n_fev, "steps": traj.stats.n_steps})
    if capped:
        raise TruncationError(f"truncation point below s_min_cap={trunc.s_min_cap}; tail bound {tail:.3e}", res)
    return res


def H_on_trajectory(sys: SystemDef, xi, t: float, bounds: DichotomyBounds,
                    trunc: TruncationConfig = TruncationConfig(), cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """H[t, phi(t, 0, xi)]: H evaluated on the solution through (0, xi)."""
    x_t = integrate_flow(sys, 0.0, xi, t, cfg).y_end
    return H_eval(sys, t, x_t, bounds, trunc, cfg).value


def _jacobian_run(sys, t, x, trunc, cfg, hessian=False):
    n = sys.n
    x = np.asarray(x, dtype=float).reshape(n)
    zr = z_backward(sys, t, x, trunc.s_min_cap, cfg, trunc.tail_tol, trunc.window, stop_early=True, hessian=hessian)
    if not zr.converged:
        raise ConvergenceError(
            f"Z(s, x) did not stabilise before s_min_cap={trunc.s_min_cap}",
            {"s_end": zr.s_end, "F_integral": zr.F_integral(zr.s_end), "last_window_tail": zr.tail_estimate},
        )
    return zr


def H_jacobian(sys: SystemDef, t: float, x, trunc: TruncationConfig = TruncationConfig(),
               cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """DH(t, x) as the limit of Z(s, x) = Psi(t, s) d phi(s, t, x)/dx as s -> -inf."""
    n = sys.n
    if sys.f_is_zero:
        return np.eye(n)
    return _jacobian_run(sys, t, x, trunc, cfg).converged_limit


def H_with_jacobian(sys: SystemDef, t: float, x, bounds: DichotomyBounds,
                    trunc: TruncationConfig = TruncationConfig(),
                    cfg: Optional[IntegratorConfig] = None) -> tuple[ConjugacyResult, np.ndarray]:
    """H(t, x) and DH(t, x) from a single backward pass."""
    n = sys.n
    x = np.asarray(x, dtype=float).reshape(n)
    if sys.f_is_zero:
        return H_eval(sys, t, x, bounds, trunc, cfg), np.eye(n)
    s0, tail = truncation_point(t, bounds, trunc.tail_tol)
    if s0 < trunc.s_min_cap:
        # let H_eval produce the capped result and raise
        H_eval(sys, t, x, bounds, trunc, cfg)
    cfg = cfg or IntegratorConfig()
    if trunc.quad_rtol < cfg.rtol:
        cfg = IntegratorConfig(trunc.quad_rtol, cfg.atol, cfg.max_step, cfg.max_steps)
    zr = z_backward(sys, t, x, trunc.s_min_cap, cfg, trunc.tail_tol, trunc.window, stop_early=True, h_until=s0)
    if not zr.converged:
        raise ConvergenceError(
            f"Z(s, x) did not stabilise before s_min_cap={trunc.s_min_cap}",
            {"s_end": zr.s_end, "F_integral": zr.F_integral(zr.s_end), "last_window_tail": zr.tail_estimate},
        )
    res = ConjugacyResult(zr.H_value(s0), float(s0), float(tail), bounds.h4_ok is not False,
                          {"nodes": zr.traj.stats.n_fev, "steps": zr.traj.stats.n_steps})
    return res, zr.converged_limit


def H_hessian(sys: SystemDef, t: float, x, i: int, j: int, trunc: TruncationConfig = TruncationConfig(),
              cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """d2 H(t, x) / dx_j dx_i as the limit of Psi(t, s) d2 phi(s, t, x)/dx_j dx_i."""
    return H_hessian_all(sys, t, x, trunc, cfg)[i, j]


def H_hessian_all(sys: SystemDef, t: float, x, trunc: TruncationConfig = TruncationConfig(),
                  cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """Every second derivative at once; entry [i, j] is the n-vector d2 H / dx_j dx_i."""
    n = sys.n
    if sys.f_is_zero:
        return np.zeros((n, n, n))
    zr = _jacobian_run(sys, t, x, trunc, cfg, hessian=True)
    return zr.hessian(zr.s_converged)


def L_eval(sys: SystemDef, tau: float, y, bounds: DichotomyBounds, trunc: TruncationConfig = TruncationConfig(),
           cfg: Optional[IntegratorConfig] = None, tol: float = 1e-8, max_iter: int = 50) -> np.ndarray:
    """Solve H(tau, x) = y for x.

    Newton on DH seeded at x = y, with a damped fixed-point fallback
    x <- y - (H(tau, x) - x) when Newton stops reducing the residual.
    """
    n = sys.n
    y = np.asarray(y, dtype=float).reshape(n)
    if sys.f_is_zero:
        return y.copy()
    target = min(tol, 1e-11)

    def residual(x):
        return H_eval(sys, tau, x, bounds, trunc, cfg).value - y

    x = y.copy()
    r = residual(x)
    best = (inf_norm(r), x)
    for _ in range(max_iter):
        rn = inf_norm(r)
        if rn <= target:
            return x
        J = H_jacobian(sys, tau, x, trunc, cfg)
        x_new = x - np.linalg.solve(J, r)
        r_new = residual(x_new)
        if inf_norm(r_new) >= rn:
            # Newton stalled: damped fixed-point step on x -> y - (H(x) - x)
            x_new = x - 0.5 * r
            r_new = residual(x_new)
            if inf_norm(r_new) >= rn:
                break
        x, r = x_new, r_new
        if inf_norm(r) < best[0]:
            best = (inf_norm(r), x)
    if best[0] <= tol:
        return best[1]
    raise InversionError(f"inversion of H stalled with residual {best[0]:.3e}", x=best[1], residual=best[0])


def conjugacy_defects(sys: SystemDef, xi, t_grid: Sequence[float], bounds: DichotomyBounds,
                      trunc: TruncationConfig = TruncationConfig(), cfg: Optional[IntegratorConfig] = None):
    """Per-t defect ||H[t, phi(t,0,xi)] - Psi(t,0) H[0, xi]||_inf."""
    n = sys.n
    xi = np.asarray(xi, dtype=float).reshape(n)
    h0 = H_eval(sys, 0.0, xi, bounds, trunc, cfg).value
    ts = [float(t) for t in t_grid]
    psis = transition_matrices(sys, 0.0, ts, cfg)
    fwd = [t for t in ts if t > 0]
    bwd = [t for t in ts if t < 0]
    flows = {}
    for group in (fwd, bwd):
        if group:
            end = max(group) if group[0] > 0 else min(group)
            traj = integrate_flow(sys, 0.0, xi, end, cfg, stops=group)
            for t in group:
                flows[t] = eval_dense(traj, t)
    out = []
    for t, psi in zip(ts, psis):
        x_t = flows.get(t, xi)
        h_t = H_eval(sys, t, x_t, bounds, trunc, cfg).value
        out.append(inf_norm(h_t - psi @ h0))
    return out


def conjugacy_defect(sys: SystemDef, xi, t_grid: Sequence[float], bounds: DichotomyBounds,
                     trunc: TruncationConfig = TruncationConfig(), cfg: Optional[IntegratorConfig] = None) -> float:
    """Max over t_grid of the conjugacy-identity defect."""
    return max(conjugacy_defects(sys, xi, t_grid, bounds, trunc, cfg))
