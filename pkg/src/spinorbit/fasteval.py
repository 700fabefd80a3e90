"""Fast evaluation of the tidal acceleration by piecewise Chebyshev fits.

Work in u = 2θ̇/n, where the kinks sit at integers. Away from an integer
(Case 1) the function is smooth and a degree-25 fit is used. Within 0.08 of
an integer (Case 2) the kink's own term is evaluated exactly and the
remaining terms come from a degree-7 fit, so at most one fractional power
is taken per call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.fft import dct

from .hansen import HansenTable
from .model import (
    ModelArrays,
    ModelParams,
    accel_tide_exact,
    accel_tide_term,
    model_arrays,
    tide_exact_kernel,
    tide_term_kernel,
)

__all__ = [
    "ChebFit",
    "FastArrays",
    "FastTide",
    "FastTideBuildError",
    "accel_tide_fast",
    "build_fast_tide",
    "cheb_fit",
    "tide_fast_kernel",
    "tide_fast_many",
]

log = logging.getLogger(__name__)

ERROR_BOUND = 4e-14
CASE1_DEGREE = 25
CASE2_DEGREE = 7
KINK_HALFWIDTH = 0.08
CASE1_PIECES = 4  # sub-intervals per band
DOMAIN = (-1.5, 5.5)  # θ̇/n
VERIFY_POINTS = 10_000


class FastTideBuildError(RuntimeError):
    """A fit failed the construction-time error bound."""


@dataclass(frozen=True)
class ChebFit:
    """Chebyshev series on ``interval`` (θ̇ in rad/yr)."""

    interval: tuple[float, float]
    coeffs: np.ndarray

    def __post_init__(self):
        lo, hi = self.interval
        if not hi > lo:
            raise ValueError(f"degenerate interval {self.interval}")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        lo, hi = self.interval
        return np.polynomial.chebyshev.chebval((2.0 * np.asarray(x) - lo - hi) / (hi - lo), self.coeffs)


def cheb_fit(func, lo: float, hi: float, degree: int) -> np.ndarray:
    """Interpolate ``func`` at the Chebyshev-Gauss points of [lo, hi]."""
    npts = degree + 1
    nodes = np.cos(np.pi * (np.arange(npts) + 0.5) / npts)
    samples = func(lo + 0.5 * (hi - lo) * (nodes + 1.0))
    c = dct(samples, type=2) / npts
    c[0] *= 0.5
    return c


class FastArrays(NamedTuple):
    """Packed fits for the compiled kernel (pass as ``*fa``).

    Each fit row starts with an affine map x = a u + b onto [-1, 1]; Case-2
    rows also carry the index into Q_TIDE of the zone's own term (or -1).
    """

    scal: np.ndarray  # see the F_* indices
    c1: np.ndarray  # (bands * pieces, 2 + 26)
    c2: np.ndarray  # (zones, 3 + 8)


F_TWO_OVER_N, F_U_LO, F_U_HI, F_HALFWIDTH, F_PIECES, F_PIECE_SCALE, F_N = range(7)


@njit(cache=True, inline="always", error_model="numpy")
def _clenshaw(c, row, start, x):
    """Chebyshev series ``c[row, start:]`` at x in [-1, 1].

    The even and odd parts run as two independent recurrences in
    y = 2x^2 - 1, halving the dependency chain. The odd part uses
    V_k(y) = (T_{k+1}(y) + T_k(y)) / (1 + y), for which T_{2k+1}(x) = x V_k(y).
    """
    nc = c.shape[1] - start
    ne = (nc + 1) // 2
    no = nc // 2
    y = 2.0 * x * x - 1.0
    y2 = 2.0 * y
    e1 = 0.0
    e2 = 0.0
    o1 = 0.0
    o2 = 0.0
    for k in range(ne - 1, 0, -1):
        e1, e2 = y2 * e1 - e2 + c[row, start + 2 * k], e1
        if k < no:
            o1, o2 = y2 * o1 - o2 + c[row, start + 2 * k + 1], o1
    val = y * e1 - e2 + c[row, start]
    if no > 0:
        val += x * ((y2 - 1.0) * o1 - o2 + c[row, start + 1])
    return val


@njit(cache=True, inline="always", error_model="numpy")
def tide_fast_kernel(theta_dot, mscal, tri, tide, fscal, c1, c2):
    """Return (value, fractional powers taken, outside-domain flag).

    Arguments are ``*ModelArrays, *FastArrays``; ``tri`` is unused.
    """
    u = theta_dot * fscal[F_TWO_OVER_N]
    if u < fscal[F_U_LO] or u > fscal[F_U_HI]:
        return tide_exact_kernel(theta_dot, mscal, tide), tide.shape[0], True
    fl = math.floor(u)
    fr = u - fl
    hw = fscal[F_HALFWIDTH]
    if fr < hw or fr > 1.0 - hw:
        z = int(fl - fscal[F_U_LO])
        if fr > 0.5:
            z += 1
        val = _clenshaw(c2, z, 3, c2[z, 0] * u + c2[z, 1])
        term = int(c2[z, 2])
        if term >= 0:
            return val + tide_term_kernel(term, theta_dot, mscal, tide), 1, False
        return val, 0, False
    pieces = int(fscal[F_PIECES])
    s = int((fr - hw) * fscal[F_PIECE_SCALE])
    if s >= pieces:
        s = pieces - 1
    i = int(fl - fscal[F_U_LO]) * pieces + s
    return _clenshaw(c1, i, 2, c1[i, 0] * u + c1[i, 1]), 0, False


@njit(cache=True)
def tide_fast_many(theta_dot, mscal, tri, tide, fscal, c1, c2):
    out = np.empty(theta_dot.shape[0])
    npow = np.empty(theta_dot.shape[0], dtype=np.int64)
    for k in range(theta_dot.shape[0]):
        v, p, _ = tide_fast_kernel(theta_dot[k], mscal, tri, tide, fscal, c1, c2)
        out[k] = v
        npow[k] = p
    return out, npow


@dataclass(frozen=True)
class FastTide:
    """Immutable set of fits plus the arrays used by the compiled kernel."""

    global_fits: tuple[ChebFit, ...]
    near_kink_fits: tuple[ChebFit, ...]
    kink_halfwidth: float
    domain: tuple[float, float]  # θ̇ in rad/yr
    max_error: float
    arrays: FastArrays
    model: ModelArrays

    def case(self, theta_dot: float) -> int:
        """1 for the smooth fit, 2 near an integer of 2θ̇/n."""
        u = theta_dot * self.arrays.scal[F_TWO_OVER_N]
        fr = u - math.floor(u)
        return 2 if fr < self.kink_halfwidth or fr > 1.0 - self.kink_halfwidth else 1

    def evaluate(self, theta_dot: float) -> tuple[float, int, bool]:
        """(value, fractional powers taken, fell back to exact)."""
        return tide_fast_kernel(float(theta_dot), *self.model, *self.arrays)


def accel_tide_fast(theta_dot, fast: FastTide):
    """Tidal acceleration through the fits; exact outside the covered domain."""
    scalar = np.ndim(theta_dot) == 0
    arr = np.atleast_1d(np.asarray(theta_dot, dtype=float))
    out, _ = tide_fast_many(arr, *fast.model, *fast.arrays)
    return float(out[0]) if scalar else out


def _affine(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.stack([2.0 / (hi - lo), -(hi + lo) / (hi - lo)], axis=1)


def _pack(n, u_lo, u_hi, hw, c1, c1_lo, c1_hi, c2, c2_lo, c2_hi, zone_terms) -> FastArrays:
    scal = np.empty(7)
    scal[F_TWO_OVER_N] = 2.0 / n
    scal[F_U_LO] = u_lo
    scal[F_U_HI] = u_hi
    scal[F_HALFWIDTH] = hw
    scal[F_PIECES] = CASE1_PIECES
    scal[F_PIECE_SCALE] = CASE1_PIECES / (1.0 - 2.0 * hw)
    scal[F_N] = n
    zt = np.asarray(zone_terms, dtype=float)[:, None]
    return FastArrays(
        scal=scal,
        c1=np.ascontiguousarray(np.hstack([_affine(c1_lo, c1_hi), c1])),
        c2=np.ascontiguousarray(np.hstack([_affine(c2_lo, c2_hi), zt, c2])),
    )


def _cache_key(params: ModelParams, table: HansenTable) -> str:
    blob = json.dumps(
        {
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in params.raw().items()},
            "g20": sorted((int(q), float(v)) for q, v in table.g20.items()),
            "layout": [CASE1_DEGREE, CASE2_DEGREE, KINK_HALFWIDTH, CASE1_PIECES, DOMAIN],
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def build_fast_tide(
    params: ModelParams,
    table: HansenTable,
    *,
    verify: bool = True,
    cache_dir: str | Path | None = None,
) -> FastTide:
    """Fit the tidal acceleration and check every piece against 4e-14.

    With ``cache_dir`` the coefficients are stored in and re-read from a
    ``.npz`` file keyed by a hash of (params, table).
    """
    n = params.n
    ma = model_arrays(params, table)
    u_lo, u_hi = 2 * DOMAIN[0], 2 * DOMAIN[1]
    hw = KINK_HALFWIDTH

    def exact_u(u):
        return accel_tide_exact(0.5 * n * u, params, table)

    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"fasttide-{_cache_key(params, table)}.npz"

    zone_terms = []
    c2_lo, c2_hi = [], []
    for j in range(int(u_lo), int(u_hi) + 1):
        c2_lo.append(max(j - hw, u_lo))
        c2_hi.append(min(j + hw, u_hi))
        q = j - 2
        zone_terms.append(params.Q_TIDE.index(q) if q in params.Q_TIDE else -1)
    c1_lo, c1_hi = [], []
    width = (1.0 - 2 * hw) / CASE1_PIECES
    for b in range(int(u_lo), int(u_hi)):
        for s in range(CASE1_PIECES):
            c1_lo.append(b + hw + s * width)
            c1_hi.append(b + hw + (s + 1) * width)

    if cache_file is not None and cache_file.exists():
        data = np.load(cache_file)
        c1, c2, max_error = data["c1"], data["c2"], float(data["max_error"])
        verify = False
        log.debug("loaded fast-tide fits from %s", cache_file)
    else:
        c1 = np.array([cheb_fit(exact_u, lo, hi, CASE1_DEGREE) for lo, hi in zip(c1_lo, c1_hi)])
        c2_rows = []
        for lo, hi, term in zip(c2_lo, c2_hi, zone_terms):
            if term >= 0:
                q = params.Q_TIDE[term]

                def remainder(u, q=q):
                    th = 0.5 * n * u
                    return accel_tide_exact(th, params, table) - accel_tide_term(q, th, params, table)

                c2_rows.append(cheb_fit(remainder, lo, hi, CASE2_DEGREE))
            else:
                c2_rows.append(cheb_fit(exact_u, lo, hi, CASE2_DEGREE))
        c2 = np.array(c2_rows)
        max_error = math.nan

    fa = _pack(n, u_lo, u_hi, hw, c1, c1_lo, c1_hi, c2, c2_lo, c2_hi, zone_terms)

    if verify:
        max_error = 0.0
        for lo, hi in list(zip(c1_lo, c1_hi)) + list(zip(c2_lo, c2_hi)):
            # keep the grid strictly inside so each point exercises this piece
            u = np.linspace(lo, hi, VERIFY_POINTS + 2)[1:-1]
            th = 0.5 * n * u
            got, _ = tide_fast_many(th, *ma, *fa)
            err = np.abs(got - accel_tide_exact(th, params, table))
            k = int(np.argmax(err))
            if err[k] > ERROR_BOUND:
                raise FastTideBuildError(
                    f"fit error {err[k]:.3e} exceeds {ERROR_BOUND:g} at θ̇/n = {0.5 * u[k]:.9f}"
                )
            max_error = max(max_error, float(err[k]))
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache_file, c1=c1, c2=c2, max_error=max_error)

    global_fits = tuple(
        ChebFit((0.5 * n * lo, 0.5 * n * hi), c) for lo, hi, c in zip(c1_lo, c1_hi, c1)
    )
    near = tuple(ChebFit((0.5 * n * lo, 0.5 * n * hi), c) for lo, hi, c in zip(c2_lo, c2_hi, c2))
    return FastTide(
        global_fits=global_fits,
        near_kink_fits=near,
        kink_halfwidth=hw,
        domain=(DOMAIN[0] * n, DOMAIN[1] * n),
        max_error=max_error,
        arrays=fa,
        model=ma,
    )
