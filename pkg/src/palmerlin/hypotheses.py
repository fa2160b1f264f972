"""Numerical estimation and checking of the standing hypotheses.

Every sup or Lipschitz estimate here is a maximum over a finite grid, hence a
lower bound on the true supremum. Reports say "estimated >=" and never claim
certified suprema.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .conjugacy import DichotomyBounds, TruncationConfig
from .errors import CapabilityError, DomainError, InconsistencyError, NotExponentiallyStableError, PreconditionError
from .ode import IntegratorConfig, eval_dense, inf_norm, integrate, integrate_flow, transition_matrices
from .system import GSystem, SystemDef
from .variational import z_backward

__all__ = [
    "GridSpec",
    "DichotomyEstimate",
    "FBounds",
    "D1Result",
    "D2Result",
    "D3Result",
    "GronwallResult",
    "HypothesisReport",
    "estimate_dichotomy",
    "estimate_f_bounds",
    "check_h4",
    "check_h5",
    "check_d1",
    "check_d2",
    "check_d3",
    "check_gronwall",
    "corollary_split",
    "run_hypothesis_suite",
    "G_CONDITIONS",
]


@dataclass(frozen=True)
class GridSpec:
    t_range: tuple[float, float] = (-10.0, 10.0)
    t_count: int = 41
    x_box: tuple[tuple[float, float], ...] = ((-10.0, 10.0),)
    x_count_per_dim: int = 41
    xi_probes: tuple[tuple[float, ...], ...] = ((1.0,),)
    check_times: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.t_count < 2 or self.x_count_per_dim < 2:
            raise ValueError("grid counts must be at least 2")
        if not self.t_range[1] > self.t_range[0]:
            raise ValueError("t_range must be nondegenerate")
        for lo, hi in self.x_box:
            if not hi > lo:
                raise ValueError("x_box must be nondegenerate in every coordinate")

    @property
    def ts(self) -> np.ndarray:
        return np.linspace(self.t_range[0], self.t_range[1], self.t_count)

    def xs(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, self.x_count_per_dim) for lo, hi in self.x_box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------- (H3) ------

@dataclass(frozen=True)
class DichotomyEstimate:
    K: float
    alpha: float
    alpha_max: float
    K_fit: float
    K_validation: float
    n_samples: int

    def __iter__(self):
        return iter((self.K, self.alpha))


def _norm_samples(sys, ts, cfg):
    lags, logs = [], []
    for j in range(len(ts) - 1):
        psis = transition_matrices(sys, ts[j], ts[j + 1:], cfg, land=False)
        for t, psi in zip(ts[j + 1:], psis):
            nrm = inf_norm(psi)
            if not (nrm > 0 and math.isfinite(nrm)):
                raise DomainError(f"degenerate transition matrix norm {nrm} at ({t}, {ts[j]})")
            lags.append(t - ts[j])
            logs.append(math.log(nrm))
    # lag 0 always contributes ||I|| = 1, which forces K >= 1
    lags.append(0.0)
    logs.append(0.0)
    return np.array(lags), np.array(logs)


def estimate_dichotomy(sys: SystemDef, grid: GridSpec, cfg: Optional[IntegratorConfig] = None,
                       K_cap: float = 1e3, growth_tol: float = 1e-6) -> DichotomyEstimate:
    """Fit ||Psi(t, s)|| <= K exp(-alpha (t - s)) on the grid's (t >= s) pairs.

    A rate alpha is admissible when the minimal K making the bound hold is
    already attained on lags up to half the grid span; otherwise the bound is
    still growing with the lag and cannot be uniform. Among admissible rates
    the pair maximising alpha / K is returned (both the (H4) margin and the
    4 K mu / alpha bound depend only on that ratio); K is then re-checked on
    a ten times denser grid and raised if the denser grid demands it.
    """
    ts = grid.ts
    lags, logs = _norm_samples(sys, ts, cfg)
    half = lags.max() / 2.0
    short = lags <= half + 1e-12

    def logK(alpha):
        return float(np.max(logs + alpha * lags))

    def admissible(alpha):
        v = logs + alpha * lags
        return float(np.max(v[short])) >= float(np.max(v)) - growth_tol

    tiny = 1e-8
    if not admissible(tiny):
        raise NotExponentiallyStableError(
            f"||Psi(t,s)|| grows with t - s on the sample grid (system {sys.name!r})")
    hi = 1.0
    while admissible(hi):
        hi *= 2.0
        if hi > 1e6:
            raise NotExponentiallyStableError("decay rate unbounded on the sample grid")
    lo = tiny if hi == 1.0 else hi / 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    alpha_max = lo
    if alpha_max <= 1e-6:
        raise NotExponentiallyStableError(f"no positive decay rate found (alpha_max={alpha_max:.2e})")

    def neg_log_ratio(alpha):
        return -(math.log(alpha) - logK(alpha))

    opt = minimize_scalar(neg_log_ratio, bounds=(alpha_max * 1e-3, alpha_max), method="bounded",
                          options={"xatol": alpha_max * 1e-10})
    alpha = alpha_max if neg_log_ratio(alpha_max) <= opt.fun else float(opt.x)
    if math.exp(logK(alpha)) > K_cap:
        lo_a, hi_a = alpha_max * 1e-3, alpha
        for _ in range(80):
            mid = 0.5 * (lo_a + hi_a)
            lo_a, hi_a = (mid, hi_a) if math.exp(logK(mid)) <= K_cap else (lo_a, mid)
        alpha = lo_a
    K_fit = math.exp(logK(alpha))

    dense = np.linspace(ts[0], ts[-1], 10 * (len(ts) - 1) + 1)
    vlags, vlogs = _norm_samples(sys, dense, cfg)
    K_val = math.exp(float(np.max(vlogs + alpha * vlags)))
    K = max(K_fit, K_val, 1.0)
    if K > K_cap:
        raise NotExponentiallyStableError(f"fitted K={K:.3g} exceeds K_cap={K_cap:g}")
    return DichotomyEstimate(K=K, alpha=alpha, alpha_max=alpha_max, K_fit=K_fit, K_validation=K_val,
                             n_samples=len(lags) + len(vlags))


# ------------------------------------------------------------ (H1)/(H2) -----

@dataclass(frozen=True)
class FBounds:
    mu: float
    gamma: float
    n_samples: int
    note: str = "grid maxima: estimated >= lower bounds of the true suprema"

    def __iter__(self):
        return iter((self.mu, self.gamma))


def estimate_f_bounds(sys: SystemDef, grid: GridSpec) -> FBounds:
    """mu = max ||f||_inf and gamma = max ||Df||_inf over the (t, x) grid."""
    mu = 0.0
    gamma = 0.0
    xs = grid.xs()
    for t in grid.ts:
        for x in xs:
            fv = inf_norm(sys.f(t, x))
            dv = inf_norm(sys.Df(t, x))
            if not (math.isfinite(fv) and math.isfinite(dv)):
                raise DomainError(f"non-finite f or Df at t={t}, x={x}", t=t, x=x)
            mu = max(mu, fv)
            gamma = max(gamma, dv)
    return FBounds(mu, gamma, len(xs) * len(grid.ts))


def check_h4(K: float, alpha: float, gamma: float) -> tuple[bool, float]:
    """gamma <= alpha / 4K; returns (pass, margin alpha/4K - gamma)."""
    margin = alpha / (4.0 * K) - gamma
    return margin >= 0.0, margin


def check_h5(sys: SystemDef, grid: GridSpec) -> tuple[bool, float]:
    worst = max(inf_norm(sys.f(t, np.zeros(sys.n))) for t in grid.ts)
    return worst <= 1e-14, worst


# ------------------------------------------------------------------ (D1) ----

@dataclass(frozen=True)
class D1Result:
    t: float
    xi: tuple
    value: float
    tail: float
    certified: bool
    truncation_point: float

    @property
    def passed(self) -> bool:
        return self.value + self.tail < 1.0


def check_d1(sys: SystemDef, t: float, xi, trunc: TruncationConfig = TruncationConfig(),
             cfg: Optional[IntegratorConfig] = None, K: float = 1.0) -> D1Result:
    """int_{-inf}^t ||Psi(t,r) Df(r, phi(r,0,xi)) Psi(r,t)||_inf dr with a tail estimate.

    The tail beyond the stopping point is bounded by K^2 df_tail(s) when the
    system supplies a time envelope for Df (exact for n = 1, where the Psi
    factors cancel); otherwise the last window's contribution is reported and
    the value is flagged uncertified.
    """
    x_t = integrate_flow(sys, 0.0, xi, t, cfg).y_end
    zr = z_backward(sys, t, x_t, trunc.s_min_cap, cfg, trunc.tail_tol, trunc.window, stop_early=True)
    s_end = zr.s_converged if zr.converged else zr.s_end
    value = zr.F_integral(s_end)
    if sys.df_tail is not None:
        tail = K * K * float(sys.df_tail(s_end))
        certified = sys.n == 1 or sys.f_is_zero
    else:
        tail = zr.tail_estimate if zr.converged else math.inf
        certified = False
    return D1Result(float(t), tuple(np.ravel(xi).tolist()), value, tail, certified, float(s_end))


# ------------------------------------------------------------------ (D2) ----

@dataclass(frozen=True)
class D2Result:
    t: float
    xi: tuple
    s_values: tuple
    linear: tuple
    perturbed: tuple
    slope_linear: float
    slope_perturbed: float
    passed: bool
    note: str = "ladder-trend heuristic for an asymptotic liminf; diagnostic only"

    @property
    def margins(self) -> tuple[float, float]:
        return (min(self.linear), min(self.perturbed))


def _ladder_ok(values) -> bool:
    v = np.asarray(values)
    if not np.all(np.isfinite(v)):
        return False
    running = np.minimum.accumulate(v)
    mid = len(v) // 2
    # no new minimum over the last half of the ladder
    return bool(running[-1] >= running[mid - 1] - 1e-9 * max(1.0, abs(running[mid - 1])))


def _slope(values) -> float:
    v = np.asarray(values)
    k = np.arange(len(v))
    mid = len(v) // 2
    return float(np.polyfit(k[mid:], v[mid:], 1)[0])


def check_d2(sys: SystemDef, t: float, xi, s_samples: Optional[Sequence[float]] = None,
             cfg: Optional[IntegratorConfig] = None) -> D2Result:
    """Evaluate -int_s^t tr A and -int_s^t tr(A + Df(r, phi(r,0,xi))) on a ladder of s."""
    n = sys.n
    if s_samples is None:
        s_samples = [t - 2.0 ** k for k in range(8)]
    s_samples = sorted((float(s) for s in s_samples), reverse=True)
    x_t = integrate_flow(sys, 0.0, xi, t, cfg).y_end

    def rhs(s, y):
        x = y[:n]
        A = sys.A(s)
        out = np.empty_like(y)
        out[:n] = A @ x + sys.f(s, x)
        trA = np.trace(A)
        out[n] = trA
        out[n + 1] = trA + np.trace(sys.Df(s, x))
        return out

    # integrating from t downwards, y[n](s) = int_t^s tr = -int_s^t tr
    traj = integrate(rhs, t, np.concatenate([x_t, [0.0, 0.0]]), s_samples[-1], cfg, stops=s_samples)
    lin, pert = [], []
    for s in s_samples:
        y = eval_dense(traj, s)
        lin.append(float(y[n]))
        pert.append(float(y[n + 1]))
    passed = _ladder_ok(lin) and _ladder_ok(pert)
    return D2Result(float(t), tuple(np.ravel(xi).tolist()), tuple(s_samples), tuple(lin), tuple(pert),
                    _slope(lin), _slope(pert), passed)


# ------------------------------------------------------------------ (D3) ----

@dataclass(frozen=True)
class D3Result:
    t: float
    xi: tuple
    i: int
    j: int
    s_ladder: tuple
    route_fd: tuple
    route_variational: tuple
    gap_fd: float
    gap_variational: float
    disagreement: float
    passed: bool


def check_d3(sys: SystemDef, t: float, xi, i: int, j: int, s_ladder: Optional[Sequence[float]] = None,
             cfg: Optional[IntegratorConfig] = None, trunc: TruncationConfig = TruncationConfig(),
             eps: float = 1e-5, cauchy_tol: float = 1e-6, agree_tol: float = 1e-4,
             raise_on_disagreement: bool = True) -> D3Result:
    """Dual-route check that lim dZ(s, x(t))/dx_j e_i exists.

    Route (a) differentiates Z_solve by central differences in x_j(t); route
    (b) uses Psi(t,s) d2 phi(s,t,x)/dx_j dx_i from the second variation.
    Passes when both ladder sequences have a final Cauchy gap below
    ``cauchy_tol`` and agree everywhere to ``agree_tol``.
    """
    if sys.D2f is None:
        raise CapabilityError(f"system {sys.name!r} has no D2f")
    n = sys.n
    if s_ladder is None:
        s_ladder = [t - 2.0 ** k for k in range(6)]
    s_ladder = sorted((float(s) for s in s_ladder), reverse=True)
    s_stop = s_ladder[-1]
    x_t = integrate_flow(sys, 0.0, xi, t, cfg).y_end
    e = np.zeros(n)
    e[j] = eps
    zp = z_backward(sys, t, x_t + e, s_stop, cfg, trunc.tail_tol, trunc.window, stops=s_ladder)
    zm = z_backward(sys, t, x_t - e, s_stop, cfg, trunc.tail_tol, trunc.window, stops=s_ladder)
    zh = z_backward(sys, t, x_t, s_stop, cfg, trunc.tail_tol, trunc.window, hessian=True, stops=s_ladder)
    route_a = [((zp.Z(s) - zm.Z(s)) / (2 * eps))[:, i] for s in s_ladder]
    route_b = [zh.hessian(s)[i, j] for s in s_ladder]
    gap_a = inf_norm(route_a[-1] - route_a[-2]) if len(s_ladder) > 1 else 0.0
    gap_b = inf_norm(route_b[-1] - route_b[-2]) if len(s_ladder) > 1 else 0.0
    disagreement = max(inf_norm(a - b) for a, b in zip(route_a, route_b))
    if raise_on_disagreement and disagreement > agree_tol:
        raise InconsistencyError(
            f"(D3) routes disagree by {disagreement:.3e} > {agree_tol:g} at t={t}, xi={xi}, (i,j)=({i},{j})")
    passed = gap_a < cauchy_tol and gap_b < cauchy_tol and disagreement <= agree_tol
    return D3Result(float(t), tuple(np.ravel(xi).tolist()), i, j, tuple(s_ladder),
                    tuple(np.asarray(route_a).tolist()), tuple(np.asarray(route_b).tolist()),
                    gap_a, gap_b, disagreement, passed)


# ------------------------------------------------------------- Gronwall -----

@dataclass(frozen=True)
class GronwallResult:
    passed: bool
    ts: tuple
    norms: tuple
    bounds: tuple


def check_gronwall(sys: SystemDef, xi, t_grid: Sequence[float], K: float, alpha: float, gamma: float,
                   cfg: Optional[IntegratorConfig] = None) -> GronwallResult:
    """|phi(t,0,xi)| <= K exp((-alpha + K gamma) t) |xi| on t_grid (t >= 0)."""
    ts = sorted(float(t) for t in t_grid)
    if ts[0] < 0:
        raise ValueError("Gronwall bound is checked for t >= t0 = 0 only")
    xi = np.asarray(xi, dtype=float).reshape(sys.n)
    traj = integrate_flow(sys, 0.0, xi, ts[-1], cfg, stops=ts) if ts[-1] > 0 else None
    norms, bounds = [], []
    for t in ts:
        x = xi if t == 0 or traj is None else eval_dense(traj, t)
        norms.append(inf_norm(x))
        bounds.append(K * math.exp((-alpha + K * gamma) * t) * inf_norm(xi))
    ok = all(nv <= bv * (1 + 1e-9) for nv, bv in zip(norms, bounds))
    return GronwallResult(ok, tuple(ts), tuple(norms), tuple(bounds))


# ------------------------------------------------------- g-only systems -----

def corollary_split(gsys: GSystem, probe_ts: Sequence[float] = (-2.0, -0.5, 0.0, 0.5, 2.0)) -> SystemDef:
    """Split x' = g(t, x) as A(t) = Dg(t, 0), f(t, x) = g(t, x) - Dg(t, 0) x."""
    n = gsys.n
    zero = np.zeros(n)
    for t in probe_ts:
        g0 = np.asarray(gsys.g(t, zero), dtype=float)
        if np.max(np.abs(g0)) > 1e-12:
            raise PreconditionError(f"g(t, 0) != 0 at t={t}: {g0}")

    def A(t):
        return np.asarray(gsys.Dg(t, zero), dtype=float).reshape(n, n)

    def f(t, x):
        return gsys.g(t, x) - A(t) @ x

    def Df(t, x):
        return gsys.Dg(t, x) - A(t)

    D2f = None
    if gsys.D2g is not None:
        D2f = gsys.D2g
    return SystemDef(n=n, A=A, f=f, Df=Df, D2f=D2f, h5=True, df_tail=gsys.df_tail,
                     name=f"split({gsys.name})", params=dict(gsys.params), oracle=dict(gsys.oracle))


G_CONDITIONS = {"G1": "H3", "G2": "H4", "G3": "D1", "G4": "D2", "G5": "D3"}


# --------------------------------------------------------------- report -----

@dataclass
class HypothesisReport:
    system: str
    K: float
    alpha: float
    alpha_max: float
    K_validation: float
    mu: float
    gamma: float
    h4_ok: bool
    h4_margin: float
    h5_ok: bool
    h5_residual: float
    d1: list = field(default_factory=list)
    d2: list = field(default_factory=list)
    d3: list = field(default_factory=list)
    gronwall: list = field(default_factory=list)
    dichotomy_ok: bool = True
    notes: list = field(default_factory=list)
    overrides: dict = field(default_factory=dict)

    @property
    def bounds(self) -> DichotomyBounds:
        return DichotomyBounds(self.K, self.alpha, self.mu, self.gamma)

    @property
    def d1_ok(self) -> bool:
        return all(r.passed for r in self.d1)

    @property
    def d2_ok(self) -> bool:
        return all(r.passed for r in self.d2)

    @property
    def d3_ok(self) -> bool:
        return all(r.passed for r in self.d3)

    @property
    def gronwall_ok(self) -> bool:
        return all(r.passed for r in self.gronwall)

    @property
    def uncertified(self) -> list:
        return [f"D1 at t={r.t}, xi={r.xi}" for r in self.d1 if not r.certified]

    def verdicts(self) -> dict:
        return {
            "H1": True,  # grid estimate always produced; see notes
            "H2": True,
            "H3": self.dichotomy_ok,
            "H4": self.h4_ok,
            "H5": self.h5_ok,
            "D1": self.d1_ok,
            "D2": self.d2_ok,
            "D3": self.d3_ok,
            "gronwall": self.gronwall_ok,
        }

    def g_verdicts(self) -> dict:
        v = self.verdicts()
        return {g: v[h] for g, h in G_CONDITIONS.items()}

    @property
    def is_split(self) -> bool:
        return self.system.startswith("split(")

    @property
    def all_pass(self) -> bool:
        return all(self.verdicts().values())

    def to_dict(self) -> dict:
        out = {
            "system": self.system,
            "dichotomy": {"K": self.K, "alpha": self.alpha, "alpha_max": self.alpha_max,
                          "K_validation": self.K_validation, "pass": self.dichotomy_ok},
            "mu_estimated_ge": self.mu,
            "gamma_estimated_ge": self.gamma,
            "H4": {"pass": self.h4_ok, "margin": self.h4_margin},
            "H5": {"pass": self.h5_ok, "residual": self.h5_residual},
            "D1": [dict(asdict(r), passed=r.passed) for r in self.d1],
            "D2": [dict(asdict(r), margins=r.margins) for r in self.d2],
            "D3": [asdict(r) for r in self.d3],
            "gronwall": [asdict(r) for r in self.gronwall],
            "verdicts": self.verdicts(),
            "all_pass": self.all_pass,
            "uncertified": self.uncertified,
            "overrides": self.overrides,
            "notes": self.notes,
        }
        if self.is_split:
            out["G_verdicts"] = self.g_verdicts()
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_hypothesis_suite(sys: SystemDef, grid: GridSpec, trunc: TruncationConfig = TruncationConfig(),
                         cfg: Optional[IntegratorConfig] = None, K: Optional[float] = None,
                         alpha: Optional[float] = None, gronwall_ts: Sequence[float] = (0.0, 1.0, 2.0, 4.0),
                         d3: bool = True) -> HypothesisReport:
    """Run every check on ``sys``; ``K`` / ``alpha`` override the fitted dichotomy."""
    notes = ["(H1)/(H2) estimates are grid maxima (lower bounds on the suprema)",
             "(D1) uses the induced infinity norm (max row sum)",
             "(D2) verdict is a ladder-trend heuristic"]
    overrides = {}
    try:
        est = estimate_dichotomy(sys, grid, cfg)
        dich_ok = True
        K_fit, a_fit, a_max, K_val = est.K, est.alpha, est.alpha_max, est.K_validation
    except NotExponentiallyStableError as exc:
        dich_ok = False
        notes.append(f"dichotomy: {exc}")
        K_fit, a_fit, a_max, K_val = math.inf, 0.0, 0.0, math.inf
    if K is not None:
        overrides["K"] = K
        K_fit = float(K)
    if alpha is not None:
        overrides["alpha"] = alpha
        a_fit = float(alpha)
    fb = estimate_f_bounds(sys, grid)
    if dich_ok or overrides:
        h4_ok, h4_margin = check_h4(K_fit, a_fit, fb.gamma) if a_fit > 0 else (False, -math.inf)
    else:
        h4_ok, h4_margin = False, -math.inf
    h5_ok, h5_res = check_h5(sys, grid)
    report = HypothesisReport(sys.name, K_fit, a_fit, a_max, K_val, fb.mu, fb.gamma, h4_ok, h4_margin,
                              h5_ok, h5_res, dichotomy_ok=dich_ok, notes=notes, overrides=overrides)
    if not dich_ok:
        return report
    Kd = K_fit if math.isfinite(K_fit) else 1.0
    for xi in grid.xi_probes:
        for t in grid.check_times:
            report.d1.append(check_d1(sys, t, xi, trunc, cfg, K=Kd))
            report.d2.append(check_d2(sys, t, xi, cfg=cfg))
            if d3 and sys.D2f is not None:
                for i in range(sys.n):
                    for j in range(sys.n):
                        report.d3.append(check_d3(sys, t, xi, i, j, cfg=cfg, trunc=trunc,
                                                  raise_on_disagreement=False))
        if sys.h5:
            report.gronwall.append(check_gronwall(sys, xi, gronwall_ts, K_fit, a_fit, fb.gamma, cfg))
    if d3 and sys.D2f is None:
        report.notes.append("(D3) skipped: no D2f")
    return report
