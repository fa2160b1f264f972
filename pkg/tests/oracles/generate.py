"""Regenerate frozen reference values with scipy only (no palmerlin imports).

Run ``python3 tests/oracles/generate.py`` to rewrite ``frozen.json``. The
scalar system is x' = -a x + c exp(-t^2) arctan(x) with a = 1, c = 0.2.
"""

import json
import math
from pathlib import Path

import numpy as np
from scipy.integrate import quad, solve_ivp

A, C = 1.0, 0.2
RTOL, ATOL = 1e-13, 1e-15
WINDOW = 40.0


def h(r):
    return C * math.exp(-r * r)


def rhs(t, y):
    return [-A * y[0] + h(t) * math.atan(y[0])]


def flow(t0, x0, t1):
    sol = solve_ivp(rhs, (t0, t1), [x0], method="DOP853", rtol=RTOL, atol=ATOL, dense_output=True)
    return lambda s: float(sol.sol(s)[0])


def rk4_endpoint(t0, x0, t1, step):
    n = int(round((t1 - t0) / step))
    x, t = x0, t0
    f = lambda t, x: -A * x + h(t) * math.atan(x)  # noqa: E731
    for _ in range(n):
        k1 = f(t, x)
        k2 = f(t + step / 2, x + step / 2 * k1)
        k3 = f(t + step / 2, x + step / 2 * k2)
        k4 = f(t + step, x + step * k3)
        x += step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += step
    return x


def q(func, lo, hi):
    pts = [p for p in (-3.0, 0.0, 3.0) if lo < p < hi]
    return quad(func, lo, hi, points=pts or None, epsabs=1e-15, epsrel=1e-13, limit=500)[0]


def H(t, x):
    phi = flow(t, x, t - WINDOW)
    return x - q(lambda s: math.exp(-A * (t - s)) * h(s) * math.atan(phi(s)), t - WINDOW, t)


def int_df(t, x, s):
    phi = flow(t, x, s)
    return q(lambda u: h(u) / (1 + phi(u) ** 2), s, t)


def DH(t, x):
    return math.exp(-int_df(t, x, t - WINDOW))


def D2H(t, x):
    # d/dx exp(-I(x)) with I(x) = int h / (1 + phi^2); dphi(u)/dx solved alongside
    def aug(s, y):
        p, Y = y
        return [-A * p + h(s) * math.atan(p), (-A + h(s) / (1 + p * p)) * Y]

    sol = solve_ivp(aug, (t, t - WINDOW), [x, 1.0], method="DOP853", rtol=RTOL, atol=ATOL, dense_output=True)

    def integrand(u):
        p, Y = sol.sol(u)
        return h(u) * (-2 * p * Y) / (1 + p * p) ** 2

    return -DH(t, x) * q(integrand, t - WINDOW, t)


def main():
    xi = 1.0
    d1_xi1 = int_df(0.0, xi, -WINDOW)
    out = {
        "phi_2_0_1_rk4": rk4_endpoint(0.0, 1.0, 2.0, 1e-5),
        "phi_2_0_1_dop853": flow(0.0, 1.0, 2.0)(2.0),
        "phi_half_0_1": flow(0.0, 1.0, 0.5)(0.5),
        "H_0_1": H(0.0, 1.0),
        "H_1_m2": H(1.0, -2.0),
        "DH_0_1": DH(0.0, 1.0),
        "DH_m1_0p5": DH(-1.0, 0.5),
        "D2H_0_1": D2H(0.0, 1.0),
        "D1_t0_xi1": d1_xi1,
        "D1_t0_xi0": C * math.sqrt(math.pi) / 2,
        "rho_bar_0_1_beta1_P_half": (0.5 * H(0.0, 1.0) ** 2) ** -1 * DH(0.0, 1.0),
    }
    # change of variables on [0.2, 3] at t = 0 with beta = 1, P = 1/2
    out["cov_rhs_0_0p2_3"] = 2.0 * (1.0 / H(0.0, 0.2) - 1.0 / H(0.0, 3.0))
    path = Path(__file__).with_name("frozen.json")
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
