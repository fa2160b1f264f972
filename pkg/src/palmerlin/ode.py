"""Adaptive Dormand-Prince 5(4) integration with dense output.

Everything else in the package rides on :func:`integrate`. Backward
integration is handled by time reversal, so the stepper itself only ever
marches forward in the reversed clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, IntegrationBudgetError, RangeError

__all__ = [
    "IntegratorConfig",
    "StepStats",
    "Trajectory",
    "integrate",
    "integrate_flow",
    "transition_matrix",
    "transition_matrices",
    "eval_dense",
    "inf_norm",
]

# Dormand-Prince 5(4) tableau with Shampine's dense-output polynomial.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [np.array(row) for row in [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERR_EXP = -1.0 / 5.0


def inf_norm(a) -> float:
    """Vector max-norm, or the induced max-row-sum norm for matrices."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return abs(float(a))
    if a.ndim == 1:
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.max(np.sum(np.abs(a), axis=1)))


@dataclass(frozen=True)
class IntegratorConfig:
    """Step-size control settings."""

    rtol: float = 1e-9
    atol: float = 1e-12
    max_step: float = math.inf
    max_steps: int = 200_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    def tightened(self, factor: float) -> "IntegratorConfig":
        return IntegratorConfig(self.rtol * factor, self.atol * factor, self.max_step, self.max_steps)


@dataclass
class StepStats:
    n_steps: int = 0
    n_rejected: int = 0
    n_fev: int = 0


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Dense-output solution of one integration run.

    ``ts`` and ``ys`` hold the accepted step endpoints in integration order
    (decreasing times for a backward run); ``coeffs[k]`` is the ``(dim, 4)``
    polynomial of the step starting at ``ts[k]``.
    """

    t0: float
    xi: np.ndarray
    ts: np.ndarray
    ys: np.ndarray
    coeffs: np.ndarray
    stats: StepStats = field(default_factory=StepStats)

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    @property
    def span(self) -> tuple[float, float]:
        return (min(self.t0, self.t_end), max(self.t0, self.t_end))

    @property
    def direction(self) -> int:
        return 1 if self.t_end >= self.t0 else -1

    @property
    def y_end(self) -> np.ndarray:
        return self.ys[-1]

    def __call__(self, t: float) -> np.ndarray:
        return eval_dense(self, t)


def eval_dense(traj: Trajectory, t: float) -> np.ndarray:
    """Interpolate the trajectory at time ``t`` (exact at step endpoints)."""
    lo, hi = traj.span
    if not (lo <= t <= hi):
        raise RangeError(f"t={t} outside integrated span [{lo}, {hi}]")
    ts = traj.ts
    nseg = len(ts) - 1
    if nseg == 0:
        return traj.ys[0].copy()
    if traj.direction > 0:
        k = int(np.searchsorted(ts, t, side="right")) - 1
    else:
        # ts decreasing: search on the negated (increasing) array
        k = int(np.searchsorted(-ts, -t, side="right")) - 1
    if k >= nseg:
        return traj.ys[-1].copy()
    k = max(k, 0)
    if t == ts[k]:
        return traj.ys[k].copy()
    h = ts[k + 1] - ts[k]
    theta = (t - ts[k]) / h
    powers = np.array([theta, theta * theta, theta ** 3, theta ** 4])
    return traj.ys[k] + traj.coeffs[k] @ powers


def _initial_step(fun, t0, y0, f0, direction, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = fun(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if not np.isfinite(d2):
        return h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    y0,
    t1: float,
    cfg: Optional[IntegratorConfig] = None,
    stops: Iterable[float] = (),
    on_stop: Optional[Callable[[float, np.ndarray], bool]] = None,
) -> Trajectory:
    """Integrate ``y' = rhs(t, y)`` from ``t0`` to ``t1`` (either direction).

    Steps land exactly on every time in ``stops`` lying strictly between the
    endpoints. ``on_stop(t, y)`` is called there; returning True ends the run
    early, so ``Trajectory.t_end`` may differ from ``t1``.
    """
    cfg = cfg or IntegratorConfig()
    t0 = float(t0)
    t1 = float(t1)
    y = np.array(y0, dtype=float).ravel()
    dim = y.size
    stats = StepStats()

    if t1 == t0:
        return Trajectory(t0, y.copy(), np.array([t0]), y[None, :].copy(), np.zeros((0, dim, 4)), stats)

    d = 1.0 if t1 > t0 else -1.0

    def fun(tau, yy):
        stats.n_fev += 1
        out = rhs(d * tau, yy)
        return d * np.asarray(out, dtype=float).ravel()

    tau = d * t0
    tau_end = d * t1
    stop_taus = sorted({d * float(s) for s in stops if (s - t0) * d > 0 and (t1 - s) * d > 0})
    stop_taus.append(tau_end)
    stop_idx = 0

    ts = [t0]
    ys = [y.copy()]
    coeffs = []

    with np.errstate(over="ignore", invalid="ignore"):
        f = fun(tau, y)
        if not np.all(np.isfinite(f)):
            raise DomainError(f"non-finite derivative at t={t0}", t=t0, x=y.copy())
        rtol, atol = cfg.rtol, cfg.atol
        h = min(_initial_step(fun, tau, y, f, d, rtol, atol), cfg.max_step)
        K = np.empty((7, dim))
        finished = False
        while not finished:
            if stats.n_steps >= cfg.max_steps:
                partial = Trajectory(t0, ys[0], np.array(ts), np.array(ys), np.array(coeffs).reshape(-1, dim, 4), stats)
                raise IntegrationBudgetError(
                    f"step budget {cfg.max_steps} exhausted at t={ts[-1]}", partial=partial
                )
            target = stop_taus[stop_idx]
            min_step = 10 * np.spacing(abs(tau) + 1.0)
            h = max(min(h, cfg.max_step), min_step)
            h_proposed = h
            landing = tau + h >= target
            if landing:
                h = target - tau
            K[0] = f
            for i in range(1, 6):
                K[i] = fun(tau + _C[i] * h, y + h * (_A[i] @ K[:i]))
            y_new = y + h * (_B @ K[:6])
            f_new = fun(tau + h, y_new)
            K[6] = f_new
            if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(f_new))):
                stats.n_rejected += 1
                if h <= min_step:
                    raise DomainError(f"non-finite derivative near t={d * tau}", t=d * tau, x=y.copy())
                h *= 0.25
                continue
            scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
            err = np.sqrt(np.mean((h * (_E @ K) / scale) ** 2))
            if err > 1.0:
                stats.n_rejected += 1
                if h <= min_step:
                    raise DomainError(f"step size underflow near t={d * tau}", t=d * tau, x=y.copy())
                h *= max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
                continue
            # accepted
            stats.n_steps += 1
            coeffs.append(h * (K.T @ _P))
            factor = _MAX_FACTOR if err == 0 else min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
            if landing:
                tau = target
                stop_idx += 1
            else:
                tau = tau + h
            y = y_new
            f = f_new
            ts.append(d * tau)
            ys.append(y.copy())
            if landing:
                if stop_idx == len(stop_taus):
                    finished = True
                elif on_stop is not None and on_stop(d * tau, y.copy()):
                    finished = True
            h = h_proposed if landing else h * factor

    return Trajectory(t0, ys[0], np.array(ts), np.array(ys), np.array(coeffs).reshape(-1, dim, 4), stats)


def integrate_flow(sys, t0: float, xi, t1: float, cfg: Optional[IntegratorConfig] = None,
                   stops: Sequence[float] = ()) -> Trajectory:
    """Solution phi(., t0, xi) of x' = A(t)x + f(t, x) over [t0, t1] (t1 < t0 allowed)."""
    xi = np.asarray(xi, dtype=float).reshape(sys.n)
    return integrate(sys.g, t0, xi, t1, cfg, stops=stops)


def _matrix_rhs(sys):
    n = sys.n

    def rhs(t, y):
        return (sys.A(t) @ y.reshape(n, n)).ravel()

    return rhs


def transition_matrix(sys, t: float, s: float, cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
    """Psi(t, s) of the linear part, integrated from s to t in whichever direction."""
    n = sys.n
    traj = integrate(_matrix_rhs(sys), s, np.eye(n).ravel(), t, cfg)
    return traj.y_end.reshape(n, n)


def transition_matrices(sys, s: float, ts: Sequence[float], cfg: Optional[IntegratorConfig] = None,
                        land: bool = True):
    """Psi(t, s) for every t in ``ts`` from at most two runs (one per direction).

    With ``land=False`` intermediate times are read from dense output instead
    of being hit exactly, which is much cheaper for dense sample grids.
    """
    n = sys.n
    ts = [float(t) for t in ts]
    out = {}
    rhs = _matrix_rhs(sys)
    for side in (1, -1):
        targets = [t for t in ts if (t - s) * side > 0]
        if not targets:
            continue
        end = max(targets) if side > 0 else min(targets)
        traj = integrate(rhs, s, np.eye(n).ravel(), end, cfg, stops=targets if land else ())
        for t in targets:
            out[t] = eval_dense(traj, t).reshape(n, n)
    return [out[t] if t != s else np.eye(n) for t in ts]
