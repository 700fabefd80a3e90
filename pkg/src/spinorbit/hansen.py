"""Hansen coefficients and the G_{20q}(e) table used by both torques."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .specfun import bessel_j_orders, binomial_ext

__all__ = [
    "G_MAX",
    "Q_REQUIRED",
    "HansenConvergenceWarning",
    "HansenTable",
    "build_g20_table",
    "hansen_x",
    "hansen_x_quadrature",
    "kepler_eccentric_anomaly",
]

G_MAX = 120
Q_REQUIRED = range(-4, 8)  # Q_TRI ∪ Q_TIDE
_CONVERGENCE_TOL = 1e-16


class HansenConvergenceWarning(RuntimeWarning):
    """The last retained term of the Hansen series is not negligible."""


def _check_e(e: float) -> float:
    e = float(e)
    if not (0.0 <= e < 1.0):
        raise ValueError(f"eccentricity must satisfy 0 <= e < 1, got {e!r}")
    return e


def _bessel_signed(orders: np.ndarray, nu: int) -> float:
    # orders holds J_0..J_N; J_{-nu} = (-1)^nu J_nu
    if nu >= 0:
        return orders[nu]
    v = orders[-nu]
    return -v if (-nu) % 2 else v


def hansen_x(k: int, n: int, m: int, e: float, g_max: int = G_MAX) -> float:
    """Hansen coefficient X_k^{n,m}(e) from the Bessel double series.

    ``(r/a)^n exp(i m f) = sum_k X_k^{n,m} exp(i k M)``. The outer sum over g
    is truncated at ``g_max``; the inner sum is finite. A
    :class:`HansenConvergenceWarning` is emitted when the last retained
    g-term exceeds 1e-16 in magnitude.
    """
    e = _check_e(e)
    k, n, m, g_max = int(k), int(n), int(m), int(g_max)
    if g_max < 1:
        raise ValueError("g_max must be >= 1")
    if e == 0.0:
        return 1.0 if k == m else 0.0

    z = (1.0 - math.sqrt(1.0 - e * e)) / e
    x = k * e
    nu_max = abs(k - m) + g_max + 1
    bes = bessel_j_orders(nu_max, abs(x))
    if x < 0.0:
        bes = bes.copy()
        bes[1::2] = -bes[1::2]

    up = n + 1 + m
    down = n + 1 - m
    c_up = [binomial_ext(up, r) for r in range(g_max + 1)]
    c_down = [binomial_ext(down, s) for s in range(g_max + 1)]

    total = 0.0
    zpow = 1.0
    last = 0.0
    for g in range(g_max + 1):
        inner = 0.0
        for h in range(g + 1):
            c = c_up[g - h] * c_down[h]
            if c != 0.0:
                inner += c * _bessel_signed(bes, k - m + g - 2 * h)
        last = zpow * inner
        total += last
        zpow *= -z
    if abs(last) > _CONVERGENCE_TOL:
        warnings.warn(
            f"Hansen series X_{k}^{{{n},{m}}}({e}) not converged at g_max={g_max}: "
            f"last term {last:.3e}",
            HansenConvergenceWarning,
            stacklevel=2,
        )
    return (1.0 + z * z) ** (-n - 1) * total


def kepler_eccentric_anomaly(mean_anomaly: np.ndarray, e: float) -> np.ndarray:
    """Solve ``M = E - e sin E`` by Newton iteration (vectorised)."""
    M = np.asarray(mean_anomaly, dtype=float)
    E = M + e * np.sin(M)
    for _ in range(50):
        dE = (E - e * np.sin(E) - M) / (1.0 - e * np.cos(E))
        E = E - dE
        if np.max(np.abs(dE)) < 1e-16:
            break
    return E


def hansen_x_quadrature(k: int, n: int, m: int, e: float, n_nodes: int = 2048) -> float:
    """X_k^{n,m}(e) by trapezoidal quadrature over one mean-anomaly period.

    Independent of the Bessel series: solves Kepler's equation on a uniform
    grid and integrates ``(r/a)^n cos(m f - k M) / 2π``. The integrand is
    periodic and analytic, so the trapezoidal rule converges geometrically.
    """
    e = _check_e(e)
    M = 2.0 * np.pi * np.arange(n_nodes) / n_nodes
    E = kepler_eccentric_anomaly(M, e)
    r_over_a = 1.0 - e * np.cos(E)
    f = 2.0 * np.arctan2(np.sqrt(1.0 + e) * np.sin(0.5 * E), np.sqrt(1.0 - e) * np.cos(0.5 * E))
    return float(np.mean(r_over_a**n * np.cos(m * f - k * M)))


@dataclass(frozen=True)
class HansenTable:
    """Immutable table of G_{20q}(e) = X_{q+2}^{-3,2}(e)."""

    e: float
    g20: Mapping[int, float]
    q_range: tuple[int, int]
    negative_q: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "g20", MappingProxyType(dict(self.g20)))

    def __getitem__(self, q: int) -> float:
        return self.g20[q]

    def covers(self, qs) -> bool:
        return all(q in self.g20 for q in qs)

    def values(self, qs) -> np.ndarray:
        return np.array([self.g20[q] for q in qs], dtype=float)


def build_g20_table(e: float, q_range: tuple[int, int] = (-12, 12), g_max: int = G_MAX) -> HansenTable:
    """Tabulate G_{20q}(e) for q in the inclusive range ``q_range``."""
    e = _check_e(e)
    lo, hi = int(q_range[0]), int(q_range[1])
    if lo > min(Q_REQUIRED) or hi < max(Q_REQUIRED):
        raise ValueError(f"q_range {q_range} must contain {{-4,...,7}}")
    g20 = {q: hansen_x(q + 2, -3, 2, e, g_max) for q in range(lo, hi + 1)}
    negative = tuple(q for q, v in g20.items() if v < 0.0 and q != -2)
    return HansenTable(e=e, g20=g20, q_range=(lo, hi), negative_q=negative)
