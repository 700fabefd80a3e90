"""Physical parameters and the triaxiality / tidal angular accelerations.

Units are kg, km and (Earth) years throughout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit

from .hansen import HansenTable, build_g20_table
from .specfun import gamma_fn

__all__ = [
    "KinkError",
    "ModelArrays",
    "ModelParams",
    "State",
    "accel_tide_deriv",
    "accel_tide_exact",
    "accel_tide_term",
    "accel_tri",
    "dump_params",
    "kink_ratios",
    "load_params",
    "model_arrays",
    "parse_params",
    "tide_exact_kernel",
    "tide_term_kernel",
    "tri_accel_kernel",
    "tri_harmonics",
]


class KinkError(ValueError):
    """Raised when a derivative is requested exactly at a kink."""


def _range_tuple(lo: int, hi: int) -> tuple[int, ...]:
    return tuple(range(lo, hi + 1))


@dataclass(frozen=True)
class ModelParams:
    """Sun/Mercury parameters; defaults reproduce the published table.

    ``zeta``, ``eta`` and ``A2`` are derived at construction and cannot be
    passed in. Use :func:`dataclasses.replace` to vary raw constants.
    """

    a: float = 5.791e7  # km
    n: float = 26.0879  # rad/yr
    R: float = 2.44e3  # km
    xi: float = 0.346
    triax: float = 9.350e-5  # (B - A)/C
    M_planet: float = 3.301e23  # kg
    mu: float = 7.967e28  # kg km^-1 yr^-2
    e: float = 0.2056
    tau_A: float = 500.0  # yr
    tau_M: float = 500.0  # yr
    alpha: float = 0.2
    M_star: float = 1.989e30  # kg
    G: float = 6.646e-5  # kg^-1 km^3 yr^-2
    Q_TRI: tuple[int, ...] = _range_tuple(-4, 6)
    Q_TIDE: tuple[int, ...] = _range_tuple(-1, 7)
    zeta: float = field(init=False)
    eta: float = field(init=False)
    A2: float = field(init=False)

    def __post_init__(self):
        if not (self.tau_A > 0 and self.tau_M > 0):
            raise ValueError("tau_A and tau_M must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if not (0.0 <= self.e < 1.0):
            raise ValueError("e must lie in [0, 1)")
        if self.n <= 0:
            raise ValueError("n must be positive")
        for name in ("Q_TRI", "Q_TIDE"):
            object.__setattr__(self, name, tuple(int(q) for q in getattr(self, name)))
        l = 2
        # C = xi M R^2 and triax = (B - A)/C, so 3(B-A)n^2/(2C) = 1.5 triax n^2
        zeta = 1.5 * self.triax * self.n**2
        A2 = 4.0 * math.pi * (2 * l * l + 4 * l + 3) * self.mu * self.R**4 / (3 * l * self.G * self.M_planet**2)
        eta = (
            3.0 * math.pi * (2 * l * l + 4 * l + 3) / (l * (l - 1))
            * self.mu * self.M_star**2 * self.R**7
            / (self.xi * self.M_planet**3 * self.a**6)
        )
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "A2", A2)

    @property
    def period(self) -> float:
        """Orbital period T0 = 2π/n in years."""
        return 2.0 * math.pi / self.n

    def raw(self) -> dict:
        """Constructor arguments (derived fields excluded)."""
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}

    def hansen_table(self, q_range: tuple[int, int] = (-12, 12)) -> HansenTable:
        lo = min(q_range[0], min(self.Q_TRI), min(self.Q_TIDE))
        hi = max(q_range[1], max(self.Q_TRI), max(self.Q_TIDE))
        return build_g20_table(self.e, (lo, hi))


_INT_SET_KEYS = ("Q_TRI", "Q_TIDE")
_FLOAT_KEYS = tuple(
    f.name for f in dataclasses.fields(ModelParams) if f.init and f.name not in _INT_SET_KEYS
)


def _parse_int_set(text: str) -> tuple[int, ...]:
    text = text.strip().strip("{}")
    if ".." in text:
        lo, hi = text.split("..")
        return _range_tuple(int(lo), int(hi))
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def parse_params(pairs, base: ModelParams | None = None) -> ModelParams:
    """Build parameters from ``key=value`` strings (or ``(key, value)`` pairs)."""
    values = (base or ModelParams()).raw()
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ValueError(f"expected key=value, got {item!r}")
            key, val = item.split("=", 1)
        else:
            key, val = item
        key = key.strip()
        if key in _INT_SET_KEYS:
            values[key] = _parse_int_set(str(val)) if not isinstance(val, (tuple, list)) else tuple(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        else:
            raise ValueError(f"unknown parameter {key!r}; known: {', '.join(_FLOAT_KEYS + _INT_SET_KEYS)}")
    return ModelParams(**values)


def load_params(path: str | Path, base: ModelParams | None = None) -> ModelParams:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        pairs.append(line)
    return parse_params(pairs, base)


def dump_params(params: ModelParams) -> str:
    lines = []
    for key, val in params.raw().items():
        if key in _INT_SET_KEYS:
            val = f"{min(val)}..{max(val)}" if tuple(val) == _range_tuple(min(val), max(val)) else " ".join(map(str, val))
        else:
            val = repr(float(val))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class State:
    """Phase point (θ [rad], θ̇ [rad/yr]) at time t [yr]."""

    theta: float
    theta_dot: float
    t: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.theta, self.theta_dot, self.t)):
            raise ValueError(f"non-finite state {self!r}")


def kink_ratios(params: ModelParams) -> np.ndarray:
    """Kink locations θ̇/n = (q+2)/2 for q in Q_TIDE."""
    return np.array([(q + 2) / 2 for q in params.Q_TIDE])


# -- numpy reference evaluation --------------------------------------------


def accel_tri(theta, t, params: ModelParams, table: HansenTable):
    """Triaxiality acceleration -ζ Σ_q G_20q sin(2θ - (q+2) n t) over Q_TRI."""
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    total = np.zeros(np.broadcast(theta, t).shape)
    for q in params.Q_TRI:
        total = total + table[q] * np.sin(2.0 * theta - (q + 2) * params.n * t)
    out = -params.zeta * total
    return float(out) if out.ndim == 0 else out


def _andrade(params: ModelParams):
    g = gamma_fn(params.alpha + 1.0)
    amp = params.tau_A ** (-params.alpha) * g
    return amp * math.cos(0.5 * math.pi * params.alpha), amp * math.sin(0.5 * math.pi * params.alpha)


def _p2(chi, params: ModelParams):
    """P_2(χ) = I'χ / ((R' + A2 χ)^2 + I'^2) and its χ-derivative."""
    r_coef, i_coef = _andrade(params)
    chi = np.asarray(chi, dtype=float)
    p = chi ** (1.0 - params.alpha)
    rp = chi + r_coef * p
    ip = -1.0 / params.tau_M - i_coef * p
    u = rp + params.A2 * chi
    den = u * u + ip * ip
    num = ip * chi
    # χ dp/dχ = (1-α) p, which stays finite as χ -> 0
    # the derivative is singular at χ = 0; callers refuse kinks before using it
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = np.where(chi > 0, (1.0 - params.alpha) * p / chi, np.inf)
        d_rp = 1.0 + r_coef * dp
        d_num = ip - i_coef * (1.0 - params.alpha) * p
        d_den = 2.0 * u * (d_rp + params.A2) - 2.0 * ip * i_coef * dp
        deriv = (d_num * den - num * d_den) / (den * den)
    return num / den, deriv


def accel_tide_term(q: int, theta_dot, params: ModelParams, table: HansenTable):
    """Single secular tidal term -η G_20q^2 P_2(|ω|) sgn(ω), ω = (q+2)n - 2θ̇."""
    omega = (q + 2) * params.n - 2.0 * np.asarray(theta_dot, dtype=float)
    p2, _ = _p2(np.abs(omega), params)
    out = -params.eta * table[q] ** 2 * p2 * np.sign(omega)
    return float(out) if out.ndim == 0 else out


def accel_tide_exact(theta_dot, params: ModelParams, table: HansenTable):
    """Secular tidal acceleration summed over Q_TIDE (sgn(0) = 0)."""
    theta_dot = np.asarray(theta_dot, dtype=float)
    total = np.zeros(theta_dot.shape)
    for q in params.Q_TIDE:
        total = total + accel_tide_term(q, theta_dot, params, table)
    return float(total) if total.ndim == 0 else total


def accel_tide_deriv(theta_dot, params: ModelParams, table: HansenTable):
    """Analytic d θ̈_TIDE / d θ̇ (units yr^-1).

    Each term contributes 2 η G^2 P_2'(|ω|). Raises :class:`KinkError` if any
    θ̇ sits exactly on a kink.
    """
    theta_dot = np.asarray(theta_dot, dtype=float)
    total = np.zeros(theta_dot.shape)
    for q in params.Q_TIDE:
        omega = (q + 2) * params.n - 2.0 * theta_dot
        if np.any(omega == 0.0):
            raise KinkError(f"derivative requested at the kink θ̇/n = {(q + 2) / 2}")
        _, dp2 = _p2(np.abs(omega), params)
        total = total + 2.0 * params.eta * table[q] ** 2 * dp2
    return float(total) if total.ndim == 0 else total


# -- compiled kernels ------------------------------------------------------


class ModelArrays(NamedTuple):
    """Flat numeric view of (params, table) for the compiled kernels.

    Kernels take the three arrays directly (``*ma``); passing plain arrays
    rather than a tuple of them keeps reference counting out of the hot
    loops.
    """

    scal: np.ndarray  # see the M_* indices
    tri: np.ndarray  # rows (q + 2, G_20q) for q in Q_TRI, sorted by q
    tide: np.ndarray  # rows (q + 2, G_20q^2) for q in Q_TIDE

    @property
    def n(self) -> float:
        return float(self.scal[M_N])


M_N, M_ZETA, M_ETA, M_A2, M_INV_TAU_M, M_RCOEF, M_ICOEF, M_BETA = range(8)


def model_arrays(params: ModelParams, table: HansenTable) -> ModelArrays:
    if not table.covers(params.Q_TRI) or not table.covers(params.Q_TIDE):
        raise ValueError("Hansen table does not cover Q_TRI and Q_TIDE")
    r_coef, i_coef = _andrade(params)
    tri_q = sorted(params.Q_TRI)
    scal = np.empty(8)
    scal[M_N] = params.n
    scal[M_ZETA] = params.zeta
    scal[M_ETA] = params.eta
    scal[M_A2] = params.A2
    scal[M_INV_TAU_M] = 1.0 / params.tau_M
    scal[M_RCOEF] = r_coef
    scal[M_ICOEF] = i_coef
    scal[M_BETA] = 1.0 - params.alpha
    tri = np.array([[q + 2, table[q]] for q in tri_q], dtype=float).reshape(-1, 2)
    tide = np.array([[q + 2, table[q] ** 2] for q in params.Q_TIDE], dtype=float).reshape(-1, 2)
    return ModelArrays(scal, tri, tide)


@njit(cache=True, inline="always", error_model="numpy")
def tri_harmonics(phase, tri):
    """Return (A, B) = (Σ G_k cos kφ, Σ G_k sin kφ) over the triaxiality modes.

    Rows of ``tri`` are sorted by k, so e^{ikφ} is advanced by rotation.
    """
    a = 0.0
    b = 0.0
    if tri.shape[0] == 0:
        return a, b
    cp = math.cos(phase)
    sp = math.sin(phase)
    k = int(tri[0, 0])
    c = 1.0
    s = 0.0
    if k >= 0:
        for _ in range(k):
            c, s = c * cp - s * sp, s * cp + c * sp
    else:
        for _ in range(-k):
            c, s = c * cp + s * sp, s * cp - c * sp
    for i in range(tri.shape[0]):
        ki = int(tri[i, 0])
        while k < ki:
            c, s = c * cp - s * sp, s * cp + c * sp
            k += 1
        a += tri[i, 1] * c
        b += tri[i, 1] * s
    return a, b


@njit(cache=True, inline="always", error_model="numpy")
def tri_accel_kernel(theta, tau, scal, tri):
    """Triaxiality acceleration at local time tau (phase n*tau)."""
    a, b = tri_harmonics(scal[M_N] * tau, tri)
    return -scal[M_ZETA] * (math.sin(2.0 * theta) * a - math.cos(2.0 * theta) * b)


@njit(cache=True, inline="always", error_model="numpy")
def tide_term_kernel(i, theta_dot, scal, tide):
    """Tidal term for the i-th entry of Q_TIDE; one fractional power."""
    w = tide[i, 0] * scal[M_N] - 2.0 * theta_dot
    if w == 0.0:
        return 0.0
    chi = abs(w)
    p = chi ** scal[M_BETA]
    rp = chi + scal[M_RCOEF] * p
    ip = -scal[M_INV_TAU_M] - scal[M_ICOEF] * p
    u = rp + scal[M_A2] * chi
    val = -scal[M_ETA] * tide[i, 1] * (ip * chi / (u * u + ip * ip))
    return val if w > 0.0 else -val


@njit(cache=True, inline="always", error_model="numpy")
def tide_exact_kernel(theta_dot, scal, tide):
    total = 0.0
    for i in range(tide.shape[0]):
        total += tide_term_kernel(i, theta_dot, scal, tide)
    return total
