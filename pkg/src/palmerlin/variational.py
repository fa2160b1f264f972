"""First and second variational equations and the parameter-dependent Z-system.

All quantities are co-integrated with the nonlinear flow in a single
augmented state so that matrices ride the same adaptive steps as phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapabilityError
from .ode import IntegratorConfig, Trajectory, eval_dense, inf_norm, integrate, integrate_flow, transition_matrix
from .system import SystemDef

__all__ = [
    "VariationResult",
    "ZResult",
    "first_variation",
    "second_variation",
    "F_matrix",
    "Z_solve",
    "z_backward",
    "Bundle",
]

DEFAULT_WINDOW = 5.0
DEFAULT_TAIL_TOL = 1e-8


class Bundle:
    """Slice layout of an augmented state vector.

    Blocks, each optional except ``phi``:
    ``M`` = Psi(t, s), ``N`` = Psi(s, t), ``Z`` with ``Fint`` = |int_s^t ||F|| dr|,
    ``Y`` = d phi / d x, ``W[i, j]`` = d2 phi / dx_j dx_i and ``Hint`` =
    int_s^t Psi(t, r) f(r, phi) dr.
    """

    def __init__(self, n: int, M=False, Z=False, Y=False, W=False, Hint=False):
        self.n = n
        nn = n * n
        pos = 0

        def take(size):
            nonlocal pos
            sl = slice(pos, pos + size)
            pos += size
            return sl

        self.phi = take(n)
        self.M = take(nn) if (M or Z or W) else None
        self.N = take(nn) if Z else None
        self.Z = take(nn) if Z else None
        self.Fint = take(1) if Z else None
        self.Y = take(nn) if (Y or W) else None
        self.W = take(nn * n) if W else None
        if Hint and self.M is None:
            self.M = take(nn)
        self.Hint = take(n) if Hint else None
        self.size = pos

    def initial(self, x) -> np.ndarray:
        n = self.n
        y = np.zeros(self.size)
        y[self.phi] = np.asarray(x, dtype=float).reshape(n)
        eye = np.eye(n).ravel()
        for blk in (self.M, self.N, self.Z, self.Y):
            if blk is not None:
                y[blk] = eye
        return y

    def mat(self, y, blk) -> np.ndarray:
        return y[blk].reshape(self.n, self.n)

    def w(self, y) -> np.ndarray:
        n = self.n
        return y[self.W].reshape(n, n, n)

    def rhs(self, sys: SystemDef):
        n = self.n
        if self.W is not None and sys.D2f is None:
            raise CapabilityError(f"system {sys.name!r} has no D2f; second variations unavailable")
        lay = self

        def rhs(s, y):
            x = y[lay.phi]
            A = sys.A(s)
            out = np.empty_like(y)
            fx = sys.f(s, x)
            out[lay.phi] = A @ x + fx
            need_df = lay.Z is not None or lay.Y is not None
            Df = sys.Df(s, x) if need_df else None
            if lay.M is not None:
                M = y[lay.M].reshape(n, n)
                out[lay.M] = -(M @ A).ravel()
                if lay.Hint is not None:
                    out[lay.Hint] = -(M @ fx)
            if lay.Z is not None:
                N = y[lay.N].reshape(n, n)
                Z = y[lay.Z].reshape(n, n)
                F = M @ Df @ N
                out[lay.N] = (A @ N).ravel()
                out[lay.Z] = (F @ Z).ravel()
                out[lay.Fint] = -np.max(np.sum(np.abs(F), axis=1))
            if lay.Y is not None:
                J = A + Df
                Y = y[lay.Y].reshape(n, n)
                out[lay.Y] = (J @ Y).ravel()
                if lay.W is not None:
                    W = y[lay.W].reshape(n, n, n)
                    T = sys.D2f(s, x)
                    # forcing[i, j] = D2f[., a, b] (Y e_j)_a (Y e_i)_b as nested mat-vec products
                    TY = np.einsum("pab,bi->pai", T, Y)
                    forcing = np.einsum("pai,aj->ijp", TY, Y)
                    out[lay.W] = (np.einsum("pq,ijq->ijp", J, W) + forcing).ravel()
            return out

        return rhs


@dataclass(frozen=True, eq=False)
class VariationResult:
    """Flow plus first (and optionally second) variations along it."""

    traj: Trajectory
    bundle: Bundle
    t0: float

    @property
    def base(self) -> Callable[[float], np.ndarray]:
        return self.phi

    def phi(self, s: float) -> np.ndarray:
        return eval_dense(self.traj, s)[self.bundle.phi]

    def dphi(self, s: float) -> np.ndarray:
        return self.bundle.mat(eval_dense(self.traj, s), self.bundle.Y)

    def d2phi(self, s: float, i: int, j: int) -> np.ndarray:
        if self.bundle.W is None:
            raise CapabilityError("second variations were not requested (second=False)")
        return self.bundle.w(eval_dense(self.traj, s))[i, j]

    def det_positive(self) -> bool:
        """Liouville check: det dphi > 0 at every step endpoint."""
        lay = self.bundle
        return all(np.linalg.det(y[lay.Y].reshape(lay.n, lay.n)) > 0 for y in self.traj.ys)


def first_variation(sys: SystemDef, t0: float, xi, s_lo: float, cfg: Optional[IntegratorConfig] = None,
                    second: bool = False) -> VariationResult:
    """Integrate Y' = (A + Df(s, phi)) Y, Y(t0) = I alongside the flow from t0 to s_lo."""
    lay = Bundle(sys.n, Y=True, W=second)
    traj = integrate(lay.rhs(sys), t0, lay.initial(xi), s_lo, cfg)
    return VariationResult(traj, lay, float(t0))


def second_variation(sys: SystemDef, t0: float, xi, s_lo: float, i: int, j: int,
                     cfg: Optional[IntegratorConfig] = None) -> Callable[[float], np.ndarray]:
    """s -> d2 phi(s, t0, xi) / dxi_j dxi_i, zero at s = t0."""
    if sys.D2f is None:
        raise CapabilityError(f"system {sys.name!r} has no D2f")
    res = first_variation(sys, t0, xi, s_lo, cfg, second=True)
    return lambda s: res.d2phi(s, i, j)


def F_matrix(sys: SystemDef, t: float, r: float, xi, cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """Psi(t, r) Df(r, phi(r, 0, xi)) Psi(r, t), each factor computed on its own."""
    x_r = integrate_flow(sys, 0.0, xi, r, cfg).y_end
    return transition_matrix(sys, t, r, cfg) @ sys.Df(r, x_r) @ transition_matrix(sys, r, t, cfg)


@dataclass(frozen=True, eq=False)
class ZResult:
    """Backward solution of dZ/ds = F(s, x(t)) Z with Z(t) = I."""

    t: float
    x_t: np.ndarray
    xi: Optional[np.ndarray]
    traj: Trajectory
    bundle: Bundle
    converged_limit: Optional[np.ndarray]
    s_converged: Optional[float]
    tail_estimate: float
    bound_ok: bool
    window: float

    @property
    def converged(self) -> bool:
        return self.converged_limit is not None

    @property
    def s_end(self) -> float:
        return self.traj.t_end

    def Z(self, s: float) -> np.ndarray:
        return self.bundle.mat(eval_dense(self.traj, s), self.bundle.Z)

    def F_integral(self, s: float) -> float:
        return abs(float(eval_dense(self.traj, s)[self.bundle.Fint][0]))

    def Psi_ts(self, s: float) -> np.ndarray:
        return self.bundle.mat(eval_dense(self.traj, s), self.bundle.M)

    def H_value(self, s: float) -> np.ndarray:
        """x_t - int_s^t Psi(t, r) f(r, phi(r, t, x_t)) dr (requires ``h_until``)."""
        if self.bundle.Hint is None:
            raise CapabilityError("H integral was not accumulated (h_until=None)")
        return self.x_t - eval_dense(self.traj, s)[self.bundle.Hint]

    def hessian(self, s: float) -> np.ndarray:
        """Psi(t, s) d2 phi(s, t, x) / dx_j dx_i for every (i, j), shape (n, n, n)."""
        y = eval_dense(self.traj, s)
        M = self.bundle.mat(y, self.bundle.M)
        return np.einsum("pq,ijq->ijp", M, self.bundle.w(y))


def _bound_holds(lay: Bundle, ys) -> bool:
    for y in ys:
        fint = abs(float(y[lay.Fint][0]))
        if inf_norm(y[lay.Z].reshape(lay.n, lay.n)) > math.exp(fint) * (1 + 1e-9) + 1e-12:
            return False
    return True


def z_backward(sys: SystemDef, t: float, x_t, s_stop: float, cfg: Optional[IntegratorConfig] = None,
               tail_tol: float = DEFAULT_TAIL_TOL, window: float = DEFAULT_WINDOW, stop_early: bool = False,
               hessian: bool = False, stops: Sequence[float] = (), xi=None,
               h_until: Optional[float] = None) -> ZResult:
    """Core backward run from (t, x_t) to s_stop with windowed tail detection.

    At every window boundary s_k = t - k*window the run compares the window's
    contribution to int ||F|| against ``tail_tol`` and the change of Z (and of
    the Hessian block when ``hessian``) against ``tail_tol * exp(Fint)``. The
    first boundary passing both sets ``converged_limit``; with ``stop_early``
    the run ends there. ``h_until`` also accumulates the H integral and keeps
    the run going at least down to that point.
    """
    lay = Bundle(sys.n, Z=True, W=hessian, Hint=h_until is not None)
    n = sys.n
    nwin = int(math.floor((t - s_stop) / window))
    win_stops = [t - k * window for k in range(1, nwin + 1)]
    win_set = set(win_stops)
    state = {"prev": lay.initial(x_t), "limit": None, "s": None, "tail": math.inf}

    def limit_of(y):
        Z = lay.mat(y, lay.Z)
        if not hessian:
            return Z
        M = lay.mat(y, lay.M)
        return Z, np.einsum("pq,ijq->ijp", M, lay.w(y))

    def done(s):
        return stop_early and state["limit"] is not None and (h_until is None or s <= h_until)

    def on_stop(s, y):
        if s not in win_set:
            return done(s)
        prev = state["prev"]
        state["prev"] = y
        fint = abs(float(y[lay.Fint][0]))
        d_fint = fint - abs(float(prev[lay.Fint][0]))
        scale = tail_tol * math.exp(fint)
        dz = inf_norm(lay.mat(y, lay.Z) - lay.mat(prev, lay.Z))
        ok = d_fint < tail_tol and dz < scale
        if ok and hessian:
            h_now = limit_of(y)[1]
            h_prev = limit_of(prev)[1]
            ok = float(np.max(np.abs(h_now - h_prev))) < scale * max(1.0, float(np.max(np.abs(h_now))))
        if ok and state["limit"] is None:
            state["limit"] = y
            state["s"] = s
            state["tail"] = d_fint
        return done(s)

    extra = {float(s) for s in stops}
    if h_until is not None:
        extra.add(float(h_until))
    all_stops = sorted(set(win_stops) | extra)
    traj = integrate(lay.rhs(sys), t, lay.initial(x_t), s_stop, cfg, stops=all_stops, on_stop=on_stop)
    y_lim = state["limit"]
    return ZResult(
        t=float(t), x_t=np.asarray(x_t, dtype=float).reshape(n), xi=None if xi is None else np.asarray(xi, float),
        traj=traj, bundle=lay,
        converged_limit=None if y_lim is None else lay.mat(y_lim, lay.Z),
        s_converged=state["s"], tail_estimate=state["tail"],
        bound_ok=_bound_holds(lay, traj.ys), window=window,
    )


def Z_solve(sys: SystemDef, t: float, xi, s_stop: float, cfg: Optional[IntegratorConfig] = None,
            tail_tol: float = DEFAULT_TAIL_TOL, window: float = DEFAULT_WINDOW,
            stops: Sequence[float] = ()) -> ZResult:
    """Z(s, x(t)) for s in [s_stop, t], where x(t) = phi(t, 0, xi)."""
    if not s_stop < t:
        raise ValueError(f"Z_solve needs s_stop < t, got s_stop={s_stop}, t={t}")
    x_t = integrate_flow(sys, 0.0, xi, t, cfg).y_end
    return z_backward(sys, t, x_t, s_stop, cfg, tail_tol, window, stops=stops, xi=xi)
