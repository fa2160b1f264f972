"""Batch front end: ``palmerlin check|conjugacy|density|sweep --config run.json``.

Exit codes: 0 success, 1 certification failure, 2 configuration error,
3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .conjugacy import DichotomyBounds, H_eval, H_with_jacobian, TruncationConfig
from .density import (
    DensityPair,
    integrability_check,
    make_linear_density,
    rho_bar,
    rho_bar_divergence_check,
    rho_linear,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DomainError,
    IntegrationBudgetError,
    NotExponentiallyStableError,
    PalmerError,
    TruncationError,
)
from .hypotheses import GridSpec, estimate_dichotomy, estimate_f_bounds, run_hypothesis_suite
from .ode import IntegratorConfig, inf_norm, integrate_flow, transition_matrix
from .systems import build_preset

log = logging.getLogger("palmerlin")

EXIT_OK, EXIT_CERT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("check", "conjugacy", "density")
NON_CONVERGENCE = (ConvergenceError, TruncationError, IntegrationBudgetError)

_KNOWN_KEYS = {
    "preset", "params", "t_range", "t_count", "x_box", "x_count_per_dim", "xi_probes", "check_times",
    "tail_tol", "s_min_cap", "quad_rtol", "window", "rtol", "atol", "max_step", "max_steps",
    "tasks", "output_dir", "seed", "random_probes", "K", "alpha", "mu", "beta", "d3",
    "gronwall_times", "integrability_radius", "integrability_levels",
}


@dataclass
class RunConfig:
    preset: str
    params: dict
    grid: GridSpec
    trunc: TruncationConfig
    integrator: IntegratorConfig
    tasks: tuple = TASKS
    output_dir: str = "palmer_out"
    seed: int = 0
    random_probes: int = 0
    K: Optional[float] = None
    alpha: Optional[float] = None
    mu: Optional[float] = None
    beta: Optional[float] = None
    d3: bool = True
    gronwall_times: tuple = (0.0, 1.0, 2.0, 4.0)
    integrability_radius: float = 0.5
    integrability_levels: int = 6
    raw: dict = field(default_factory=dict)


def _floats(seq, what):
    try:
        return tuple(float(v) for v in seq)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a list of numbers") from exc


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON config; every problem raises :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "preset" not in data:
        raise ConfigError("config needs a 'preset'")
    params = data.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigError("'params' must be an object")
    sysdef = build_preset(data["preset"], params)
    n = sysdef.n
    try:
        x_box = data.get("x_box", [[-3.0, 3.0]] * n)
        if len(x_box) != n:
            raise ConfigError(f"x_box needs {n} intervals, got {len(x_box)}")
        xi_probes = data.get("xi_probes", [[1.0] * n])
        if any(len(p) != n for p in xi_probes):
            raise ConfigError(f"every xi probe needs {n} coordinates")
        grid = GridSpec(
            t_range=_floats(data.get("t_range", [-3.0, 3.0]), "t_range"),
            t_count=int(data.get("t_count", 7)),
            x_box=tuple(_floats(b, "x_box entry") for b in x_box),
            x_count_per_dim=int(data.get("x_count_per_dim", 7)),
            xi_probes=tuple(_floats(p, "xi probe") for p in xi_probes),
            check_times=_floats(data.get("check_times", [0.0]), "check_times"),
        )
        trunc = TruncationConfig(
            tail_tol=float(data.get("tail_tol", 1e-8)),
            s_min_cap=float(data.get("s_min_cap", -200.0)),
            quad_rtol=float(data.get("quad_rtol", 1e-9)),
            window=float(data.get("window", 5.0)),
        )
        max_step = data.get("max_step")
        integ = IntegratorConfig(
            rtol=float(data.get("rtol", 1e-9)),
            atol=float(data.get("atol", 1e-12)),
            max_step=math.inf if max_step is None else float(max_step),
            max_steps=int(data.get("max_steps", 200_000)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    tasks = tuple(data.get("tasks", TASKS))
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown tasks {bad}; choose from {list(TASKS)}")

    def opt(key):
        v = data.get(key)
        if v is None:
            return None
        try:
            v = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'{key}' must be a number") from exc
        if not v > 0:
            raise ConfigError(f"'{key}' must be positive")
        return v

    try:
        seed = int(data.get("seed", 0))
        random_probes = int(data.get("random_probes", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError("'seed' and 'random_probes' must be integers") from exc
    if random_probes < 0:
        raise ConfigError("'random_probes' must be >= 0")
    return RunConfig(
        preset=data["preset"], params=params, grid=grid, trunc=trunc, integrator=integ, tasks=tasks,
        output_dir=str(data.get("output_dir", "palmer_out")), seed=seed, random_probes=random_probes,
        K=opt("K"), alpha=opt("alpha"), mu=opt("mu"), beta=opt("beta"), d3=bool(data.get("d3", True)),
        gronwall_times=_floats(data.get("gronwall_times", [0.0, 1.0, 2.0, 4.0]), "gronwall_times"),
        integrability_radius=float(data.get("integrability_radius", 0.5)),
        integrability_levels=int(data.get("integrability_levels", 6)),
        raw=dict(data),
    )


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


# ----------------------------------------------------------------- helpers --

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PALMER_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(func: Callable, items: Sequence) -> list:
    """Map in worker threads; results come back in input order."""
    workers = min(_threads(), max(1, len(items)))
    if workers == 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return "%.12g" % float(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _text_report(title: str, pairs: Sequence[tuple]) -> str:
    width = max((len(k) for k, _ in pairs), default=0)
    lines = [title, "=" * len(title)]
    lines += [f"{k.ljust(width)}  {v}" for k, v in pairs]
    return "\n".join(lines) + "\n"


def _probe_points(cfg: RunConfig) -> list:
    ts = cfg.grid.ts
    xs = cfg.grid.xs()
    pts = [(float(t), x) for t in ts for x in xs]
    if cfg.random_probes:
        rng = np.random.default_rng(cfg.seed)
        lo = np.array([b[0] for b in cfg.grid.x_box])
        hi = np.array([b[1] for b in cfg.grid.x_box])
        for _ in range(cfg.random_probes):
            t = float(rng.uniform(*cfg.grid.t_range))
            pts.append((t, rng.uniform(lo, hi)))
    return pts


@dataclass
class Context:
    cfg: RunConfig
    sys: object
    bounds: DichotomyBounds
    fitted: dict


def _context(cfg: RunConfig) -> Context:
    sysdef = build_preset(cfg.preset, cfg.params)
    fitted = {}
    if cfg.K is None or cfg.alpha is None:
        est = estimate_dichotomy(sysdef, cfg.grid, cfg.integrator)
        fitted.update(K=est.K, alpha=est.alpha)
    K = cfg.K if cfg.K is not None else fitted["K"]
    alpha = cfg.alpha if cfg.alpha is not None else fitted["alpha"]
    fb = estimate_f_bounds(sysdef, cfg.grid)
    mu = cfg.mu if cfg.mu is not None else fb.mu
    fitted.update(mu_estimated_ge=fb.mu, gamma_estimated_ge=fb.gamma)
    return Context(cfg, sysdef, DichotomyBounds(K, alpha, mu, fb.gamma), fitted)


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands --

def cmd_check(cfg: RunConfig, strict: bool = False) -> int:
    sysdef = build_preset(cfg.preset, cfg.params)
    report = run_hypothesis_suite(sysdef, cfg.grid, cfg.trunc, cfg.integrator, K=cfg.K, alpha=cfg.alpha,
                                  gronwall_ts=cfg.gronwall_times, d3=cfg.d3)
    out = _out_dir(cfg)
    d = report.to_dict()
    uncertified = report.uncertified
    d["warning"] = bool(uncertified)
    _write_json(out / "check_report.json", d)
    pairs = [("system", report.system),
             ("K", f"{report.K:.6g}"), ("alpha", f"{report.alpha:.6g}"),
             ("mu (estimated >=)", f"{report.mu:.6g}"), ("gamma (estimated >=)", f"{report.gamma:.6g}"),
             ("H4 margin alpha/4K - gamma", f"{report.h4_margin:.6g}")]
    for r in report.d1:
        pairs.append((f"D1 t={r.t:g} xi={list(r.xi)}", f"{r.value:.6g} + tail {r.tail:.2e}"
                      + ("" if r.certified else " (uncertified)")))
    for r in report.d2:
        pairs.append((f"D2 t={r.t:g} xi={list(r.xi)}", "min margins " + ", ".join(f"{m:.6g}" for m in r.margins)))
    for r in report.d3:
        pairs.append((f"D3 t={r.t:g} xi={list(r.xi)} ({r.i},{r.j})",
                      f"gaps {r.gap_fd:.2e}/{r.gap_variational:.2e}, disagreement {r.disagreement:.2e}"))
    for k, v in report.verdicts().items():
        pairs.append((f"verdict {k}", "pass" if v else "FAIL"))
    if report.is_split:
        for k, v in report.g_verdicts().items():
            pairs.append((f"verdict {k}", "pass" if v else "FAIL"))
    pairs += [("note", n) for n in report.notes]
    (out / "check_report.txt").write_text(_text_report("Hypothesis report", pairs), encoding="utf-8")
    if not report.all_pass:
        return EXIT_CERT
    if uncertified:
        log.warning("uncertified: %s", "; ".join(uncertified))
        if strict:
            return EXIT_CERT
    return EXIT_OK


def _conjugacy_row(ctx: Context, t: float, x: np.ndarray):
    sysdef, cfg = ctx.sys, ctx.cfg
    n = sysdef.n
    try:
        hr, J = H_with_jacobian(sysdef, t, x, ctx.bounds, cfg.trunc, cfg.integrator)
        xi = integrate_flow(sysdef, t, x, 0.0, cfg.integrator).y_end
        h0 = H_eval(sysdef, 0.0, xi, ctx.bounds, cfg.trunc, cfg.integrator).value
        psi = transition_matrix(sysdef, t, 0.0, cfg.integrator)
        defect = inf_norm(hr.value - psi @ h0)
        det = float(np.linalg.det(J))
        return [t, *x, *hr.value, det, defect, hr.tail_bound, "ok"], None
    except PalmerError as exc:
        return [t, *x, *([None] * n), None, None, None, type(exc).__name__], exc


def cmd_conjugacy(cfg: RunConfig, strict: bool = False) -> int:
    ctx = _context(cfg)
    n = ctx.sys.n
    pts = _probe_points(cfg)
    results = _ordered_map(lambda p: _conjugacy_row(ctx, p[0], np.asarray(p[1], dtype=float)), pts)
    rows = [r for r, _ in results]
    errors = [e for _, e in results if e is not None]
    header = ["t", *(f"x{i}" for i in range(n)), *(f"H{i}" for i in range(n)), "detDH", "defect", "tail_bound",
              "status"]
    out = _out_dir(cfg)
    write_csv(out / "conjugacy.csv", header, rows)
    ok = [r for r in rows if r[-1] == "ok"]
    max_defect = max((r[2 * n + 2] for r in ok), default=float("nan"))
    max_dev = max((max(abs(r[1 + n + i] - r[1 + i]) for i in range(n)) for r in ok), default=float("nan"))
    det_min = min((r[2 * n + 1] for r in ok), default=float("nan"))
    bound = ctx.bounds.palmer_bound
    summary = {
        "system": ctx.sys.name, "rows": len(rows), "failed_rows": len(errors),
        "max_defect": max_defect, "max_H_minus_id": max_dev, "palmer_bound_4Kmu_over_alpha": bound,
        "palmer_bound_ok": bool(max_dev <= bound + cfg.trunc.tail_tol) if ok else False,
        "min_detDH": det_min, "orientation_ok": bool(det_min > 0) if ok else False,
        "K": ctx.bounds.K, "alpha": ctx.bounds.alpha, "mu": ctx.bounds.mu, "fitted": ctx.fitted,
        "note": "mu is a grid estimate (lower bound of the supremum) unless overridden",
    }
    _write_json(out / "conjugacy_summary.json", _clean(summary))
    pairs = [(k, v if isinstance(v, str) else json.dumps(_clean(v))) for k, v in summary.items()]
    (out / "conjugacy_summary.txt").write_text(_text_report("Conjugacy sweep", pairs), encoding="utf-8")
    if errors:
        if any(isinstance(e, NON_CONVERGENCE) for e in errors):
            return EXIT_NUMERIC
        return EXIT_CERT
    if not (summary["palmer_bound_ok"] and summary["orientation_ok"]):
        return EXIT_CERT
    return EXIT_OK


def _density_row(dp: DensityPair, t: float, x: np.ndarray):
    n = dp.sys.n
    try:
        rb = rho_bar(dp, None, t, x)
        rl = rho_linear(dp.linear, t, x)
        div = rho_bar_divergence_check(dp, None, t, x)
        return [t, *x, rb, rl, div, "1" if (div > 0 and rb > 0) else "0", "ok"], None
    except PalmerError as exc:
        return [t, *x, None, None, None, "0", type(exc).__name__], exc


def cmd_density(cfg: RunConfig, strict: bool = False) -> int:
    ctx = _context(cfg)
    sysdef = ctx.sys
    n = sysdef.n
    if not sysdef.h5:
        raise ConfigError(f"density needs f(t, 0) = 0; preset {cfg.preset!r} does not declare it")
    ld = make_linear_density(sysdef, ctx.bounds.K, ctx.bounds.alpha, cfg.grid, beta=cfg.beta)
    dp = DensityPair(ld, sysdef, ctx.bounds, cfg.trunc, cfg.integrator)
    pts = _probe_points(cfg)
    kept = [(t, np.asarray(x, dtype=float)) for t, x in pts if np.any(np.asarray(x) != 0)]
    excluded = len(pts) - len(kept)
    results = _ordered_map(lambda p: _density_row(dp, p[0], p[1]), kept)
    rows = [r for r, _ in results]
    errors = [e for _, e in results if e is not None]
    header = ["t", *(f"x{i}" for i in range(n)), "rho_bar", "rho_linear", "divergence", "pass", "status"]
    out = _out_dir(cfg)
    write_csv(out / "density.csv", header, rows)
    ok = [r for r in rows if r[-1] == "ok"]
    min_div = min((r[n + 3] for r in ok), default=float("nan"))
    t_int = cfg.grid.check_times[0]
    try:
        integ = integrability_check(dp, None, t_int, cfg.integrability_radius, levels=cfg.integrability_levels)
        integ_d = {"t": t_int, "radii": integ.radii, "partial": integ.partial, "ratios": integ.ratios,
                   "expected_ratio": integ.expected_ratio, "tail_estimate": integ.tail_estimate,
                   "pass": integ.passed}
    except PalmerError as exc:
        errors.append(exc)
        integ_d = {"t": t_int, "pass": False, "error": str(exc)}
    summary = {
        "system": sysdef.name, "rows": len(rows), "failed_rows": sum(1 for r in rows if r[-1] != "ok"),
        "excluded_origin_rows": excluded,
        "note": "rows with x = 0 are excluded: the density is defined on x != 0",
        "beta": ld.beta, "beta_positivity_threshold": ld.beta_threshold,
        "integrability_margin_2beta_minus_n": ld.integrability_margin,
        "horizon_T": ld.horizon_T, "P_tail_bound": ld.tail_bound,
        "min_divergence": min_div, "divergence_ok": bool(min_div > 0) if ok else False,
        "integrability": integ_d, "fitted": ctx.fitted,
    }
    _write_json(out / "density_summary.json", _clean(summary))
    pairs = [(k, v if isinstance(v, str) else json.dumps(_clean(v))) for k, v in summary.items()]
    (out / "density_summary.txt").write_text(_text_report("Density sweep", pairs), encoding="utf-8")
    if errors:
        if any(isinstance(e, NON_CONVERGENCE) for e in errors):
            return EXIT_NUMERIC
        return EXIT_CERT
    if not (summary["divergence_ok"] and integ_d["pass"] and all(r[n + 4] == "1" for r in rows)):
        return EXIT_CERT
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, strict: bool = False) -> int:
    """Run every task listed in the config; the worst exit code wins."""
    handlers = {"check": cmd_check, "conjugacy": cmd_conjugacy, "density": cmd_density}
    codes = [handlers[t](cfg, strict) for t in cfg.tasks]
    return max(codes, default=EXIT_OK)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


COMMANDS = {"check": cmd_check, "conjugacy": cmd_conjugacy, "density": cmd_density, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palmerlin",
                                description="Numerical linearization toolkit: hypotheses, conjugacy H, densities.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--strict", action="store_true", help="treat uncertified results as failures")
    p.add_argument("--out", help="output directory (overrides output_dir in the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.output_dir = args.out
        code = COMMANDS[args.command](cfg, args.strict)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except NON_CONVERGENCE as exc:
        print(f"numerical non-convergence: {exc}", file=_sys.stderr)
        return EXIT_NUMERIC
    except NotExponentiallyStableError as exc:
        print(f"certification failure: {exc}", file=_sys.stderr)
        return EXIT_CERT
    except DomainError as exc:
        print(f"domain error: {exc}", file=_sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.command}: exit {code} (outputs in {cfg.output_dir})")
    return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
