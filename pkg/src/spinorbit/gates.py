"""Numerical validation gates shared by the CLI and the test-suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hansen import Q_REQUIRED, hansen_x, hansen_x_quadrature
from .integrators import SpinOrbitSystem
from .model import State, accel_tide_exact

__all__ = ["GateResult", "fast_tide_gate", "hansen_gate", "hem_gate", "wrap_angle"]

HANSEN_TOL = 1e-12
FAST_TIDE_TOL = 4e-14
HEM_TOL_THETA = 3e-13
HEM_TOL_THETA_DOT = 1.4e-12
REFERENCE_TOL = 1e-15


@dataclass
class GateResult:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    detail: list = field(default_factory=list)

    def line(self) -> str:
        m = " ".join(f"{k}={v:.3g}" for k, v in self.measured.items())
        t = " ".join(f"{k}<={v:.3g}" for k, v in self.tolerance.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {m} ({t})"


def wrap_angle(x):
    """Map an angle difference into [-π, π)."""
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def hansen_gate(e: float, qs=Q_REQUIRED, tol: float = HANSEN_TOL) -> GateResult:
    """Bessel-series G_{20q}(e) against Kepler quadrature."""
    worst = 0.0
    rows = []
    for q in qs:
        a = hansen_x(q + 2, -3, 2, e)
        b = hansen_x_quadrature(q + 2, -3, 2, e)
        worst = max(worst, abs(a - b))
        rows.append((q, a, b))
    g_m2 = abs(hansen_x(0, -3, 2, e))
    negative = [q for q, a, _ in rows if a < 0 and q != -2]
    ok = worst <= tol and g_m2 <= tol and (e == 0 or negative == [-1])
    return GateResult("hansen", ok, {"max_abs_diff": worst, "abs_G_m2": g_m2},
                      {"max_abs_diff": tol, "abs_G_m2": tol}, rows)


def fast_tide_gate(system: SpinOrbitSystem, samples: int = 100_000, seed: int = 0,
                   tol: float = FAST_TIDE_TOL) -> GateResult:
    """Fast tidal path against the exact sum over random θ̇ in [0, 5n]."""
    n = system.params.n
    v = np.random.default_rng(seed).uniform(0.0, 5.0 * n, samples)
    exact = accel_tide_exact(v, system.params, system.table)
    err = 0.0
    max_pow = 0
    for x, ex in zip(v, exact):
        val, npow, _ = system.fast.evaluate(x)
        err = max(err, abs(val - ex))
        max_pow = max(max_pow, npow)
    ok = err <= tol and max_pow <= 1
    return GateResult("fast_tide", ok, {"max_abs_err": err, "max_fractional_powers": max_pow},
                      {"max_abs_err": tol, "max_fractional_powers": 1})


def hem_gate(system: SpinOrbitSystem, per_strip: int = 250, seed: int = 0,
             tol_theta: float = HEM_TOL_THETA, tol_theta_dot: float = HEM_TOL_THETA_DOT) -> GateResult:
    """Hybrid Poincaré map vs RK at 1e-15 with exact tide, per H strip."""
    n = system.params.n
    rng = np.random.default_rng(seed)
    rows = []
    worst_t = worst_v = 0.0
    for s in system.layout.h_strips():
        lo, hi = s.bounds(n)
        et = ev = 0.0
        for _ in range(per_strip):
            st = State(rng.uniform(0.0, 2 * math.pi), rng.uniform(lo, hi))
            a = system.poincare_map(st, method="hybrid")
            b = system.poincare_map(st, method="rk", tide="exact", atol=REFERENCE_TOL, rtol=REFERENCE_TOL)
            et = max(et, abs(float(wrap_angle(a.theta - b.theta))))
            ev = max(ev, abs(a.theta_dot - b.theta_dot))
        rows.append((s.index, et, ev, et <= tol_theta and ev <= tol_theta_dot))
        worst_t, worst_v = max(worst_t, et), max(worst_v, ev)
    ok = all(r[3] for r in rows)
    return GateResult("hem", ok, {"max_theta_err": worst_t, "max_theta_dot_err": worst_v,
                                  "failing_strips": sum(not r[3] for r in rows)},
                      {"max_theta_err": tol_theta, "max_theta_dot_err": tol_theta_dot}, rows)
