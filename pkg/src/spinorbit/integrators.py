"""Trajectory integration: HEM Taylor stepping, DOP853 and the Poincaré map.

The period T0 = 2π/n is split into M = 24 sub-steps. At each sub-step
boundary the current θ̇ selects a strip. Type-H strips advance by the
high-order Euler method (a truncated Taylor series of the solution in time,
with the tidal term replaced by its degree-25 Taylor polynomial about the
strip centre). Type-N strips and anything outside [0, 5n] advance with an
adaptive Dormand-Prince 8(5,3) integrator.

Two HEM back ends share one definition. ``jet`` builds the Taylor series by
recursive differentiation of the ODE at run time. ``compiled`` (the default)
tabulates, for every strip and sub-step phase, the jet step as a
Fourier-Chebyshev series in (2θ, θ̇) and prunes it, which is what makes the
Poincaré map cheap in H strips.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.fft import dct, rfft

from .fasteval import FastArrays, FastTide, build_fast_tide, tide_fast_kernel
from .hansen import HansenTable
from .model import M_N, M_ZETA, ModelArrays, ModelParams, State, model_arrays, tide_exact_kernel, tri_accel_kernel
from .strips import Strip, StripLayout, default_layout

__all__ = [
    "HemMaps",
    "IntegrationError",
    "SpinOrbitSystem",
    "StepperConfig",
    "StripArrays",
    "TaylorJet",
    "build_system",
    "hem_step",
    "poincare_map",
    "rk_step_to",
    "taylor_jet",
    "tide_taylor_coeffs",
]

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# kernel status codes
OK = 0
STEP_UNDERFLOW = 1
TOO_MANY_STEPS = 2
STRIP_SKIP = 3
_STATUS_TEXT = {
    STEP_UNDERFLOW: "step size underflow",
    TOO_MANY_STEPS: "too many RK steps",
    STRIP_SKIP: "state crossed more than one strip in a sub-step",
}


class IntegrationError(RuntimeError):
    """Integration could not proceed; carries the last good state."""

    def __init__(self, message: str, state: State | None = None, status: int = 0):
        super().__init__(message)
        self.state = state
        self.status = status


@dataclass(frozen=True)
class StepperConfig:
    """Step and tolerance settings.

    The sub-step is h = T0 / steps_per_period; ``h`` is derived per model
    through :meth:`step`.
    """

    steps_per_period: int = 24
    rk_abs_tol: float = 2e-14
    rk_rel_tol: float = 2e-14
    prune_threshold: float = 1e-16
    hem_backend: str = "compiled"  # or "jet"

    def __post_init__(self):
        if self.steps_per_period < 1:
            raise ValueError("steps_per_period must be >= 1")
        if not (self.rk_abs_tol > 0 and self.rk_rel_tol > 0 and self.prune_threshold > 0):
            raise ValueError("tolerances must be positive")
        if self.hem_backend not in ("compiled", "jet"):
            raise ValueError("hem_backend must be 'compiled' or 'jet'")

    def step(self, params: ModelParams) -> float:
        return params.period / self.steps_per_period


@dataclass(frozen=True)
class TaylorJet:
    """Time derivatives θ^(0) .. θ^(D_s+1) at a base point."""

    coeffs: np.ndarray

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 2


# -- tidal Taylor polynomial about a strip centre ---------------------------


def _series_mul(a, b):
    return np.convolve(a, b)[: len(a)]


def _series_div(a, b):
    out = np.zeros_like(a)
    for k in range(len(a)):
        out[k] = (a[k] - np.dot(b[1 : k + 1], out[k - 1 :: -1][:k])) / b[0]
    return out


def tide_taylor_coeffs(center: float, degree: int, params: ModelParams, table: HansenTable) -> np.ndarray:
    """Taylor coefficients of θ̈_TIDE about θ̇ = ``center`` (powers of θ̇ - center).

    Built by truncated power-series arithmetic on each term, which is
    analytic between kinks; ``center`` must not be a kink.
    """
    from .specfun import gamma_fn

    nc = degree + 1
    total = np.zeros(nc)
    g = gamma_fn(params.alpha + 1.0) * params.tau_A ** (-params.alpha)
    r_coef = g * math.cos(0.5 * math.pi * params.alpha)
    i_coef = g * math.sin(0.5 * math.pi * params.alpha)
    beta = 1.0 - params.alpha
    for q in params.Q_TIDE:
        omega = (q + 2) * params.n - 2.0 * center
        if omega == 0.0:
            raise ValueError("expansion point lies on a kink")
        s = 1.0 if omega > 0 else -1.0
        chi0 = abs(omega)
        chi = np.zeros(nc)
        chi[0] = chi0
        if nc > 1:
            chi[1] = -2.0 * s
        # (chi0 + c1 δ)^β = chi0^β (1 + x δ)^β
        x = chi[1] / chi0 if nc > 1 else 0.0
        p = np.empty(nc)
        p[0] = chi0**beta
        for k in range(1, nc):
            p[k] = p[k - 1] * (beta - k + 1) / k * x
        rp = chi + r_coef * p
        ip = -i_coef * p
        ip[0] -= 1.0 / params.tau_M
        u = rp + params.A2 * chi
        den = _series_mul(u, u) + _series_mul(ip, ip)
        p2 = _series_div(_series_mul(ip, chi), den)
        total += -params.eta * table[q] ** 2 * s * p2
    return total


def _prune_taylor(coeffs: np.ndarray, halfwidth: float, threshold: float) -> np.ndarray:
    out = coeffs.copy()
    out[np.abs(coeffs) * halfwidth ** np.arange(len(coeffs)) < threshold] = 0.0
    return out


# -- compiled kernel data ---------------------------------------------------


class StripArrays(NamedTuple):
    edges: np.ndarray  # θ̇ boundaries, len = strips + 1
    hidx: np.ndarray  # strip -> H-strip number, -1 for N strips


class HemMaps(NamedTuple):
    """Tabulated HEM sub-step maps (pass to kernels as ``*hm``)."""

    h: float
    max_mode: int
    strip: np.ndarray  # (nH, 3): centre, half-width (rad/yr), D_s
    taylor: np.ndarray  # (nH, 26) pruned tidal Taylor coefficients about the centre
    ptr: np.ndarray  # (nH, M, 4): θ-terms start, θ̇-terms start, end, highest Chebyshev degree
    terms: np.ndarray  # (nterms, 2): trig index, Chebyshev degree
    coef: np.ndarray  # (nterms,)


@njit(cache=True)
def hem_jet_kernel(theta0, v0, phase0, order, mscal, tri, tcoef, ve):
    """Normalised Taylor coefficients a_j = θ^(j)/j!, j = 0..order, in local time.

    θ'' = F(θ, τ) + T(θ'), with F the triaxiality sum and T the tidal
    polynomial; a_{j+2} = (F_j + T_j) / ((j + 1)(j + 2)) where F_j, T_j are
    the Taylor coefficients of each side, obtained from those of sin 2θ,
    cos 2θ, the time harmonics and powers of θ' - v0.
    """
    a = np.zeros(order + 1)
    a[0] = theta0
    if order >= 1:
        a[1] = v0
    if order < 2:
        return a
    nt = order - 1
    n = mscal[M_N]
    # tidal polynomial re-expanded about v0
    P = tcoef.shape[0] - 1
    d = tcoef.copy()
    dv = v0 - ve
    for i in range(P):
        for j in range(P - 1, i - 1, -1):
            d[j] += dv * d[j + 1]
    # A(τ) = Σ G_k cos(kφ0 + knτ), B(τ) = Σ G_k sin(...)
    A = np.zeros(nt)
    B = np.zeros(nt)
    for idx in range(tri.shape[0]):
        k = tri[idx, 0]
        g = tri[idx, 1]
        w = k * n
        re = math.cos(k * phase0)
        im = math.sin(k * phase0)
        for j in range(nt):
            A[j] += g * re
            B[j] += g * im
            re, im = -im * w / (j + 1), re * w / (j + 1)
    S = np.zeros(nt)
    C = np.zeros(nt)
    S[0] = math.sin(2.0 * theta0)
    C[0] = math.cos(2.0 * theta0)
    y = np.zeros(nt)
    pw = np.zeros((nt, nt))
    for j in range(nt):
        if j >= 1:
            y[j] = (j + 1) * a[j + 1]
            ss = 0.0
            cc = 0.0
            for i in range(1, j + 1):
                ui = 2.0 * i * a[i]
                ss += ui * C[j - i]
                cc += ui * S[j - i]
            S[j] = ss / j
            C[j] = -cc / j
            pw[1, j] = y[j]
            for m in range(2, j + 1):
                acc = 0.0
                for i in range(1, j - m + 2):
                    acc += y[i] * pw[m - 1, j - i]
                pw[m, j] = acc
        f = 0.0
        for i in range(j + 1):
            f += S[i] * A[j - i] - C[i] * B[j - i]
        f *= -mscal[M_ZETA]
        tt = d[0] if j == 0 else 0.0
        top = j if j < P else P
        for m in range(1, top + 1):
            tt += d[m] * pw[m, j]
        a[j + 2] = (f + tt) / ((j + 1) * (j + 2))
    return a


@njit(cache=True)
def hem_jet_increment(theta0, v0, phase0, ds, h, mscal, tri, tcoef, ve):
    """(Δθ - v0 h, Δθ̇) for one HEM step of series degree ds."""
    a = hem_jet_kernel(theta0, v0, phase0, ds + 1, mscal, tri, tcoef, ve)
    rt = 0.0
    for j in range(ds, 1, -1):
        rt = (rt + a[j]) * h
    rt *= h
    rv = 0.0
    for j in range(ds, 0, -1):
        rv = (rv + (j + 1) * a[j + 1]) * h
    return rt, rv


@njit(cache=True)
def _jet_grid(thetas, vs, phase0, ds, h, mscal, tri, tcoef, ve):
    out_t = np.empty((thetas.shape[0], vs.shape[0]))
    out_v = np.empty((thetas.shape[0], vs.shape[0]))
    for i in range(thetas.shape[0]):
        for j in range(vs.shape[0]):
            rt, rv = hem_jet_increment(thetas[i], vs[j], phase0, ds, h, mscal, tri, tcoef, ve)
            out_t[i, j] = rt
            out_v[i, j] = rv
    return out_t, out_v


@njit(cache=True, inline="always", error_model="numpy")
def hem_compiled_increment(theta0, v0, hs, phase, max_mode, hstrip, ptr, terms, coef, work):
    """Tabulated HEM step for H strip ``hs`` at sub-step ``phase``.

    ``work`` is scratch space of length >= 2 max_mode + 1 + (max degree + 1).
    """
    x = (v0 - hstrip[hs, 0]) / hstrip[hs, 1]
    s2 = math.sin(2.0 * theta0)
    c2 = math.cos(2.0 * theta0)
    work[0] = 1.0
    cm = c2
    sm = s2
    for m in range(1, max_mode + 1):
        work[2 * m - 1] = cm
        work[2 * m] = sm
        cm, sm = cm * c2 - sm * s2, sm * c2 + cm * s2
    off = 2 * max_mode + 1
    pm = ptr[hs, phase, 3]
    work[off] = 1.0
    if pm >= 1:
        work[off + 1] = x
    for p in range(2, pm + 1):
        work[off + p] = 2.0 * x * work[off + p - 1] - work[off + p - 2]
    i0 = ptr[hs, phase, 0]
    i1 = ptr[hs, phase, 1]
    i2 = ptr[hs, phase, 2]
    rt = 0.0
    for k in range(i0, i1):
        rt += coef[k] * work[terms[k, 0]] * work[off + terms[k, 1]]
    rv = 0.0
    for k in range(i1, i2):
        rv += coef[k] * work[terms[k, 0]] * work[off + terms[k, 1]]
    return rt, rv


# -- Dormand-Prince 8(5,3) --------------------------------------------------

_C = np.array([
    0.0,
    0.526001519587677318785587544488e-01,
    0.789002279381515978178381316732e-01,
    0.118350341907227396726757197510,
    0.281649658092772603273242802490,
    0.333333333333333333333333333333,
    0.25,
    0.307692307692307692307692307692,
    0.651282051282051282051282051282,
    0.6,
    0.857142857142857142857142857142,
    1.0,
    1.0,
])

_A = np.zeros((13, 12))
_A[1, 0] = 5.26001519587677318785587544488e-2
_A[2, :2] = [1.97250569845378994544595329183e-2, 5.91751709536136983633785987549e-2]
_A[3, [0, 2]] = [2.95875854768068491816892993775e-2, 8.87627564304205475450678981324e-2]
_A[4, [0, 2, 3]] = [2.41365134159266685502369798665e-1, -8.84549479328286085344864962717e-1,
                    9.24834003261792003115737966543e-1]
_A[5, [0, 3, 4]] = [3.7037037037037037037037037037e-2, 1.70828608729473871279604482173e-1,
                    1.25467687566822425016691814123e-1]
_A[6, [0, 3, 4, 5]] = [3.7109375e-2, 1.70252211019544039314978060272e-1,
                       6.02165389804559606850219397283e-2, -1.7578125e-2]
_A[7, [0, 3, 4, 5, 6]] = [3.70920001185047927108779319836e-2, 1.70383925712239993810214054705e-1,
                          1.07262030446373284651809199168e-1, -1.53194377486244017527936158236e-2,
                          8.27378916381402288758473766002e-3]
_A[8, [0, 3, 4, 5, 6, 7]] = [6.24110958716075717114429577812e-1, -3.36089262944694129406857109825,
                             -8.68219346841726006818189891453e-1, 2.75920996994467083049415600797e1,
                             2.01540675504778934086186788979e1, -4.34898841810699588477366255144e1]
_A[9, [0, 3, 4, 5, 6, 7, 8]] = [4.77662536438264365890433908527e-1, -2.48811461997166764192642586468,
                                -5.90290826836842996371446475743e-1, 2.12300514481811942347288949897e1,
                                1.52792336328824235832596922938e1, -3.32882109689848629194453265587e1,
                                -2.03312017085086261358222928593e-2]
_A[10, [0, 3, 4, 5, 6, 7, 8, 9]] = [-9.3714243008598732571704021658e-1, 5.18637242884406370830023853209,
                                    1.09143734899672957818500254654, -8.14978701074692612513997267357,
                                    -1.85200656599969598641566180701e1, 2.27394870993505042818970056734e1,
                                    2.49360555267965238987089396762, -3.0467644718982195003823669022]
_A[11, [0, 3, 4, 5, 6, 7, 8, 9, 10]] = [2.27331014751653820792359768449, -1.05344954667372501984066689879e1,
                                        -2.00087205822486249909675718444, -1.79589318631187989172765950534e1,
                                        2.79488845294199600508499808837e1, -2.85899827713502369474065508674,
                                        -8.87285693353062954433549289258, 1.23605671757943030647266201528e1,
                                        6.43392746015763530355970484046e-1]
_A[12, [0, 5, 6, 7, 8, 9, 10, 11]] = [5.42937341165687622380535766363e-2, 4.45031289275240888144113950566,
                                      1.89151789931450038304281599044, -5.8012039600105847814672114227,
                                      3.1116436695781989440891606237e-1, -1.52160949662516078556178806805e-1,
                                      2.01365400804030348374776537501e-1, 4.47106157277725905176885569043e-2]
_B = _A[12].copy()
_E3 = _B.copy()
_E3[0] -= 0.244094488188976377952755905512
_E3[8] -= 0.733846688281611857341361741547
_E3[11] -= 0.220588235294117647058823529412e-1
_E5 = np.zeros(12)
_E5[[0, 5, 6, 7, 8, 9, 10, 11]] = [
    0.1312004499419488073250102996e-1, -0.1225156446376204440720569753e1,
    -0.4957589496572501915214079952, 0.1664377182454986536961530415e1,
    -0.3503288487499736816886487290, 0.3341791187130174790297318841,
    0.8192320648511571246570742613e-1, -0.2235530786388629525884427845e-1,
]
_MAX_RK_STEPS = 1_000_000


@njit(cache=True, inline="always", error_model="numpy")
def _accel(theta, v, tau, tide_mode, mscal, tri, tide, fscal, c1, c2):
    if tide_mode == 1:
        td, _, _ = tide_fast_kernel(v, mscal, tri, tide, fscal, c1, c2)
    else:
        td = tide_exact_kernel(v, mscal, tide)
    return tri_accel_kernel(theta, tau, mscal, tri) + td


@njit(cache=True, inline="always", error_model="numpy")
def rk_deviation(theta, v, tau0, tau1, h, atol, rtol, tide_mode, mscal, tri, tide, fscal, c1, c2):
    """DOP853 from local time tau0 to exactly tau1.

    The state is carried as deviations (φ, w) from free rotation about the
    starting point, θ = θ0 + v0 (τ - τ0) + φ and θ̇ = v0 + w, which keeps
    the increments at full relative precision. Error scaling uses the full
    θ and θ̇ values. Returns (φ, w, τ reached, next step, status, accepted steps).
    """
    kphi = np.empty(13)
    kw = np.empty(13)
    span = tau1 - tau0
    if span <= 0.0:
        return 0.0, 0.0, tau0, h, OK, 0
    if h <= 0.0:
        h = min(span, 1e-3)
    tau = tau0
    phi = 0.0
    w = 0.0
    kphi[0] = 0.0
    kw[0] = _accel(theta, v, tau0, tide_mode, mscal, tri, tide, fscal, c1, c2)
    rejected = False
    steps = 0
    while True:
        if steps >= _MAX_RK_STEPS:
            return phi, w, tau, h, TOO_MANY_STEPS, steps
        min_step = 16.0 * 2.220446049250313e-16 * max(abs(tau), span)
        if h < min_step:
            return phi, w, tau, h, STEP_UNDERFLOW, steps
        last = tau + h >= tau1
        hs = tau1 - tau if last else h
        for s in range(1, 12):
            dphi = 0.0
            dw = 0.0
            for r in range(s):
                a = _A[s, r]
                if a != 0.0:
                    dphi += a * kphi[r]
                    dw += a * kw[r]
            ts = tau + _C[s] * hs
            ps = phi + hs * dphi
            ws = w + hs * dw
            kphi[s] = ws
            kw[s] = _accel(theta + v * (ts - tau0) + ps, v + ws, ts, tide_mode, mscal, tri, tide, fscal, c1, c2)
        dphi = 0.0
        dw = 0.0
        for r in range(12):
            dphi += _B[r] * kphi[r]
            dw += _B[r] * kw[r]
        phi_new = phi + hs * dphi
        w_new = w + hs * dw
        tau_new = tau1 if last else tau + hs
        th_old = abs(theta + v * (tau - tau0) + phi)
        th_new = abs(theta + v * (tau_new - tau0) + phi_new)
        sc_t = atol + rtol * max(th_old, th_new)
        sc_v = atol + rtol * max(abs(v + w), abs(v + w_new))
        e5t = 0.0
        e5v = 0.0
        e3t = 0.0
        e3v = 0.0
        for r in range(12):
            e5t += _E5[r] * kphi[r]
            e5v += _E5[r] * kw[r]
            e3t += _E3[r] * kphi[r]
            e3v += _E3[r] * kw[r]
        e5 = (e5t / sc_t) ** 2 + (e5v / sc_v) ** 2
        e3 = (e3t / sc_t) ** 2 + (e3v / sc_v) ** 2
        if e5 == 0.0 and e3 == 0.0:
            err = 0.0
        else:
            err = hs * e5 / math.sqrt((e5 + 0.01 * e3) * 2.0)
        if err < 1.0:
            if err == 0.0:
                factor = 10.0
            else:
                factor = min(10.0, 0.9 * err ** (-0.125))
            if rejected:
                factor = min(1.0, factor)
            steps += 1
            phi = phi_new
            w = w_new
            tau = tau_new
            if not last:
                h = hs * factor
            elif hs >= h:
                h = hs * factor
            if last:
                return phi, w, tau1, h, OK, steps
            kphi[0] = w
            kw[0] = _accel(theta + v * (tau - tau0) + phi, v + w, tau, tide_mode, mscal, tri, tide, fscal, c1, c2)
            rejected = False
        else:
            h = hs * max(0.2, 0.9 * err ** (-0.125))
            rejected = True


@njit(cache=True, error_model="numpy")
def rk_advance(theta, v, tau0, tau1, h, atol, rtol, tide_mode, mscal, tri, tide, fscal, c1, c2):
    """DOP853 to exactly tau1; returns (θ, θ̇, next step, status, accepted steps)."""
    phi, w, tau, hn, status, steps = rk_deviation(theta, v, tau0, tau1, h, atol, rtol, tide_mode,
                                                  mscal, tri, tide, fscal, c1, c2)
    return theta + v * (tau - tau0) + phi, v + w, hn, status, steps


# -- Poincaré map -----------------------------------------------------------


@njit(cache=True, inline="always")
def locate_kernel(v, edges):
    """Strip index; -1 below the layout, len(edges)-1 above it."""
    ns = edges.shape[0] - 1
    if v < edges[0]:
        return -1
    if v > edges[ns]:
        return ns
    if v == edges[ns]:
        return ns - 1
    lo = 0
    hi = ns
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if edges[mid] <= v:
            lo = mid
        else:
            hi = mid
    return lo


# settings vector layout for the kernels
CFG_ATOL = 0
CFG_RTOL = 1
CFG_USE_HEM = 2
CFG_HEM_JET = 3
CFG_TIDE_FAST = 4


@njit(cache=True, inline="always", error_model="numpy")
def poincare_kernel(theta, v, nsub, period, settings, counters, rk_h, work,
                    edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                    mscal, tri, tide, fscal, c1, c2):
    """Advance one period from local time 0; θ is reduced mod 2π at the end.

    counters[0] / counters[1] accumulate HEM / RK sub-steps and rk_h[0]
    carries the adaptive RK step between calls.
    """
    hsub = period / nsub
    atol = settings[CFG_ATOL]
    rtol = settings[CFG_RTOL]
    use_hem = settings[CFG_USE_HEM] != 0.0
    jet = settings[CFG_HEM_JET] != 0.0
    tide_mode = 1 if settings[CFG_TIDE_FAST] != 0.0 else 0
    ns = hidx.shape[0]
    prev = -2
    for i in range(nsub):
        idx = locate_kernel(v, edges)
        if prev != -2 and abs(idx - prev) > 1:
            return theta, v, STRIP_SKIP
        prev = idx
        hs = -1
        if use_hem and 0 <= idx < ns:
            hs = hidx[idx]
        if hs >= 0:
            if jet:
                rt, rv = hem_jet_increment(theta, v, mscal[M_N] * (i * hsub), int(hstrip[hs, 2]), hsub,
                                           mscal, tri, taylor[hs], hstrip[hs, 0])
            else:
                rt, rv = hem_compiled_increment(theta, v, hs, i, max_mode, hstrip, ptr, terms, coef, work)
            theta = theta + v * hsub + rt
            v = v + rv
            counters[0] += 1
        else:
            tau1 = period if i == nsub - 1 else (i + 1) * hsub
            theta, v, hn, status, _ = rk_advance(theta, v, i * hsub, tau1, rk_h[0], atol, rtol, tide_mode,
                                                 mscal, tri, tide, fscal, c1, c2)
            rk_h[0] = hn
            counters[1] += 1
            if status != OK:
                return theta, v, status
    theta = theta % (2.0 * math.pi)
    return theta, v, OK


@njit(cache=True)
def poincare_once(theta, v, nsub, period, settings, counters, rk_h,
                  edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                  mscal, tri, tide, fscal, c1, c2):
    work = np.empty(2 * max_mode + 2 + (ptr[:, :, 3].max() if ptr.size else 0))
    return poincare_kernel(theta, v, nsub, period, settings, counters, rk_h, work,
                           edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                           mscal, tri, tide, fscal, c1, c2)


@njit(cache=True)
def iterate_kernel(theta, v, n_iter, stride, out, nsub, period, settings, counters, rk_h,
                   edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                   mscal, tri, tide, fscal, c1, c2):
    """Apply the map n_iter times, recording every stride-th state in ``out``."""
    work = np.empty(2 * max_mode + 2 + (ptr[:, :, 3].max() if ptr.size else 0))
    nrec = 0
    for k in range(1, n_iter + 1):
        theta, v, status = poincare_kernel(theta, v, nsub, period, settings, counters, rk_h, work,
                                           edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                                           mscal, tri, tide, fscal, c1, c2)
        if status != OK:
            return theta, v, k - 1, nrec, status
        if stride > 0 and k % stride == 0 and nrec < out.shape[0]:
            out[nrec, 0] = k
            out[nrec, 1] = theta
            out[nrec, 2] = v
            nrec += 1
    return theta, v, n_iter, nrec, OK


# -- building the tabulated HEM maps ----------------------------------------

_N_THETA = 16
_N_DELTA_CHOICES = (16, 24, 32, 48)


def _fit_phase(jet_t, jet_v):
    """Fourier (in 2θ) x Chebyshev (in θ̇) coefficients of sampled increments.

    Rows: constant, then (cos 2mθ, sin 2mθ) for m = 1 .. N/2 - 1.
    """
    out = []
    for grid in (jet_t, jet_v):
        F = rfft(grid, axis=0) / grid.shape[0]
        nm = grid.shape[0] // 2 - 1
        rows = [F[0].real]
        for m in range(1, nm + 1):
            rows.append(2.0 * F[m].real)
            rows.append(-2.0 * F[m].imag)
        trig = np.array(rows)
        c = dct(trig, type=2, axis=1) / trig.shape[1]
        c[:, 0] *= 0.5
        out.append(c)
    return out


def _prune(coef: np.ndarray, threshold: float):
    """Drop the smallest terms while their summed magnitude stays <= threshold."""
    flat = np.abs(coef).ravel()
    order = np.argsort(flat, kind="stable")
    csum = np.cumsum(flat[order])
    keep = np.ones(flat.size, dtype=bool)
    keep[order[csum <= threshold]] = False
    return np.nonzero(keep.reshape(coef.shape))


def _hem_cache_key(params: ModelParams, layout: StripLayout, cfg: StepperConfig) -> str:
    blob = json.dumps(
        {
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in params.raw().items()},
            "strips": [s.as_dict() for s in layout.strips],
            "cfg": [cfg.steps_per_period, cfg.prune_threshold],
            "grid": [_N_THETA, list(_N_DELTA_CHOICES)],
            "version": 2,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _strip_taylor(strip: Strip, params, table, threshold):
    center = float(strip.center) * params.n
    half = 0.5 * float(strip.width) * params.n
    coeffs = tide_taylor_coeffs(center, strip.taylor_degree_tide, params, table)
    return center, half, _prune_taylor(coeffs, half, threshold)


def build_hem_maps(
    params: ModelParams,
    table: HansenTable,
    layout: StripLayout,
    cfg: StepperConfig,
    cache_dir: str | Path | None = None,
) -> HemMaps:
    """Tabulate the jet HEM step for every H strip and sub-step phase.

    For each (strip, phase) the increments (Δθ - θ̇h, Δθ̇) are sampled on a
    16-point θ grid times a Chebyshev grid in θ̇, converted to a
    Fourier-Chebyshev series and pruned so the discarded coefficients sum
    to at most ``cfg.prune_threshold``. The Chebyshev grid is refined until
    its last coefficient is negligible.
    """
    ma = model_arrays(params, table)
    h = cfg.step(params)
    nsub = cfg.steps_per_period
    hstrips = layout.h_strips()
    nh = len(hstrips)
    hstrip = np.zeros((nh, 3))
    ntay = max((s.taylor_degree_tide for s in hstrips), default=0) + 1
    taylors = np.zeros((nh, ntay))
    for k, s in enumerate(hstrips):
        c, hw, tc = _strip_taylor(s, params, table, cfg.prune_threshold)
        hstrip[k] = c, hw, s.series_degree
        taylors[k, : len(tc)] = tc
    max_mode = _N_THETA // 2 - 1

    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"hem-{_hem_cache_key(params, layout, cfg)}.npz"
        if cache_file.exists():
            d = np.load(cache_file)
            log.debug("loaded HEM maps from %s", cache_file)
            return HemMaps(h, max_mode, hstrip, taylors, d["ptr"], d["terms"], d["coef"])

    thetas = np.pi * np.arange(_N_THETA) / _N_THETA
    ptr = np.zeros((nh, nsub, 4), dtype=np.int64)
    terms_l, coef_l = [], []
    count = 0
    for k in range(nh):
        ds = int(hstrip[k, 2])
        for i in range(nsub):
            phase = params.n * i * h
            for nd in _N_DELTA_CHOICES:
                nodes = np.cos(np.pi * (np.arange(nd) + 0.5) / nd)
                vs = hstrip[k, 0] + hstrip[k, 1] * nodes
                jt, jv = _jet_grid(thetas, vs, phase, ds, h, ma.scal, ma.tri, taylors[k], hstrip[k, 0])
                ct, cv = _fit_phase(jt, jv)
                tail = max(np.abs(ct[:, -1]).max(), np.abs(cv[:, -1]).max())
                if tail < 0.1 * cfg.prune_threshold:
                    break
            else:
                raise RuntimeError(
                    f"HEM map for strip {hstrips[k].index} phase {i} did not converge (tail {tail:.2e})"
                )
            mode_tail = max(np.abs(ct[-2:]).max(), np.abs(cv[-2:]).max())
            if mode_tail >= 0.1 * cfg.prune_threshold:
                raise RuntimeError(f"HEM map Fourier tail {mode_tail:.2e} too large for strip {hstrips[k].index}")
            ptr[k, i, 0] = count
            for comp, c in enumerate((ct, cv)):
                if comp == 1:
                    ptr[k, i, 1] = count
                rows, cols = _prune(c, cfg.prune_threshold)
                terms_l.append(np.stack([rows, cols], axis=1))
                coef_l.append(c[rows, cols])
                count += len(rows)
                if len(cols):
                    ptr[k, i, 3] = max(ptr[k, i, 3], cols.max())
            ptr[k, i, 2] = count
    terms = np.ascontiguousarray(np.concatenate(terms_l).astype(np.int64)) if terms_l else np.zeros((0, 2), np.int64)
    coef = np.concatenate(coef_l) if coef_l else np.zeros(0)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_file, ptr=ptr, terms=terms, coef=coef)
    return HemMaps(h, max_mode, hstrip, taylors, ptr, terms, coef)


def strip_arrays(layout: StripLayout) -> StripArrays:
    hidx = np.full(len(layout.strips), -1, dtype=np.int64)
    k = 0
    for s in layout.strips:
        if s.kind == "H":
            hidx[s.index] = k
            k += 1
    return StripArrays(edges=layout.edges(), hidx=hidx)


# -- public system object ---------------------------------------------------


@dataclass
class SpinOrbitSystem:
    """Everything needed to iterate the Poincaré map, built once and shared.

    ``method`` selects HEM in H strips ("hybrid") or RK everywhere ("rk");
    ``tide`` selects the fast or exact tidal evaluation inside RK.
    """

    params: ModelParams
    table: HansenTable
    layout: StripLayout
    cfg: StepperConfig
    fast: FastTide
    hem: HemMaps
    strips: StripArrays = field(init=False)
    model: ModelArrays = field(init=False)

    def __post_init__(self):
        self.strips = strip_arrays(self.layout)
        self.model = self.fast.model

    @property
    def period(self) -> float:
        return self.params.period

    @property
    def kernel_args(self) -> tuple:
        """Trailing arguments shared by the map kernels."""
        return (*self.strips, *self.hem, *self.model, *self.fast.arrays)

    @property
    def rhs_args(self) -> tuple:
        return (*self.model, *self.fast.arrays)

    def settings(self, method: str = "hybrid", tide: str = "fast", atol=None, rtol=None) -> np.ndarray:
        if method not in ("hybrid", "rk"):
            raise ValueError("method must be 'hybrid' or 'rk'")
        if tide not in ("fast", "exact"):
            raise ValueError("tide must be 'fast' or 'exact'")
        return np.array([
            self.cfg.rk_abs_tol if atol is None else atol,
            self.cfg.rk_rel_tol if rtol is None else rtol,
            1.0 if method == "hybrid" else 0.0,
            1.0 if self.cfg.hem_backend == "jet" else 0.0,
            1.0 if tide == "fast" else 0.0,
        ])

    def _period_index(self, t: float) -> int:
        k = round(t / self.period)
        if abs(t - k * self.period) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"state.t = {t} is not a multiple of T0 = {self.period}")
        return k

    def poincare_map(self, state: State, *, method: str = "hybrid", tide: str = "fast",
                     counters: np.ndarray | None = None, rk_h: np.ndarray | None = None,
                     atol=None, rtol=None) -> State:
        """Advance ``state`` by one period T0."""
        k = self._period_index(state.t)
        counters = np.zeros(2, dtype=np.int64) if counters is None else counters
        rk_h = np.zeros(1) if rk_h is None else rk_h
        theta, v, status = poincare_once(
            float(state.theta), float(state.theta_dot), self.cfg.steps_per_period, self.period,
            self.settings(method, tide, atol, rtol), counters, rk_h, *self.kernel_args,
        )
        if status != OK:
            raise IntegrationError(_STATUS_TEXT[status], State(theta, v, state.t), status)
        return State(theta, v, (k + 1) * self.period)

    def iterate(self, state: State, n_iter: int, *, stride: int = 1, method: str = "hybrid",
                tide: str = "fast", counters: np.ndarray | None = None):
        """Apply the map ``n_iter`` times; returns (final state, records (k, θ, θ̇))."""
        k0 = self._period_index(state.t)
        counters = np.zeros(2, dtype=np.int64) if counters is None else counters
        nrec = n_iter // stride if stride > 0 else 0
        out = np.empty((nrec, 3))
        theta, v, done, got, status = iterate_kernel(
            float(state.theta), float(state.theta_dot), int(n_iter), int(stride), out,
            self.cfg.steps_per_period, self.period, self.settings(method, tide), counters, np.zeros(1),
            *self.kernel_args,
        )
        final = State(theta, v, (k0 + done) * self.period)
        if status != OK:
            raise IntegrationError(_STATUS_TEXT[status], final, status)
        out = out[:got]
        out[:, 0] += k0
        return final, out

    def hem_step(self, state: State, strip: Strip | None = None) -> State:
        """One jet-based HEM sub-step of length h from ``state``."""
        strip = self.layout.locate(state.theta_dot) if strip is None else strip
        return hem_step(state, strip, self.cfg, self.params, self.table)

    def h_index(self, theta_dot: float) -> int:
        idx = self.layout.locate_index(theta_dot)
        return int(self.strips.hidx[idx]) if idx >= 0 else -1

    def hem_increment(self, theta: float, theta_dot: float, phase_index: int, backend: str = "compiled"):
        """(Δθ - θ̇ h, Δθ̇) for one sub-step starting at local time phase_index * h."""
        hs = self.h_index(theta_dot)
        if hs < 0:
            raise ValueError(f"θ̇ = {theta_dot} is not inside an H strip")
        hm = self.hem
        if backend == "compiled":
            work = np.empty(2 * hm.max_mode + 2 + int(hm.ptr[:, :, 3].max()))
            return hem_compiled_increment(float(theta), float(theta_dot), hs, int(phase_index), hm.max_mode,
                                          hm.strip, hm.ptr, hm.terms, hm.coef, work)
        return hem_jet_increment(float(theta), float(theta_dot), self.params.n * phase_index * hm.h,
                                 int(hm.strip[hs, 2]), hm.h, self.model.scal, self.model.tri, hm.taylor[hs],
                                 hm.strip[hs, 0])

    def rk_step_to(self, state: State, t_target: float, *, tide: str = "fast", atol=None, rtol=None) -> State:
        s = self.settings("rk", tide, atol, rtol)
        return _rk_step_to(state, t_target, s[CFG_ATOL], s[CFG_RTOL], 1 if tide == "fast" else 0,
                           self.params.period, self.rhs_args)

    def rk_increment(self, theta: float, theta_dot: float, phase_index: int, *, tide: str = "exact",
                     atol: float = 1e-15, rtol: float = 1e-15):
        """RK counterpart of :meth:`hem_increment`, unrounded by the base point."""
        s = self.settings("rk", tide, atol, rtol)
        h = self.hem.h
        phi, w, _, _, status, _ = rk_deviation(float(theta), float(theta_dot), phase_index * h,
                                               (phase_index + 1) * h, 0.0, s[CFG_ATOL], s[CFG_RTOL],
                                               1 if tide == "fast" else 0, *self.rhs_args)
        if status != OK:
            raise IntegrationError(_STATUS_TEXT[status], State(theta, theta_dot, phase_index * h), status)
        return phi, w


def _rk_step_to(state, t_target, atol, rtol, tide_mode, period, rhs) -> State:
    if not t_target > state.t:
        raise ValueError("t_target must exceed state.t")
    k = math.floor(state.t / period)
    tau0 = state.t - k * period
    tau1 = tau0 + (t_target - state.t)
    theta, v, _, status, _ = rk_advance(float(state.theta), float(state.theta_dot), tau0, tau1, 0.0,
                                        float(atol), float(rtol), tide_mode, *rhs)
    if status != OK:
        raise IntegrationError(_STATUS_TEXT[status], State(theta, v, state.t), status)
    return State(theta, v, float(t_target))


def build_system(
    params: ModelParams | None = None,
    cfg: StepperConfig | None = None,
    layout: StripLayout | None = None,
    *,
    cache_dir: str | Path | None = None,
    table: HansenTable | None = None,
) -> SpinOrbitSystem:
    """Construct Hansen table, fits, layout and tabulated HEM maps."""
    params = params or ModelParams()
    cfg = cfg or StepperConfig()
    table = table or params.hansen_table()
    layout = layout or default_layout(params.n)
    fast = build_fast_tide(params, table, cache_dir=cache_dir)
    hem = build_hem_maps(params, table, layout, cfg, cache_dir=cache_dir)
    return SpinOrbitSystem(params, table, layout, cfg, fast, hem)


# -- functional API ---------------------------------------------------------


def _local_time(t: float, period: float) -> float:
    return t - math.floor(t / period) * period


def taylor_jet(state: State, strip: Strip, cfg: StepperConfig, params: ModelParams, table: HansenTable) -> TaylorJet:
    """Time derivatives of θ up to order D_s + 1 from the strip's HEM model."""
    if not strip or strip.kind != "H":
        raise ValueError("taylor_jet needs an H strip")
    center, _, tc = _strip_taylor(strip, params, table, cfg.prune_threshold)
    ma = model_arrays(params, table)
    tau = _local_time(state.t, params.period)
    a = hem_jet_kernel(float(state.theta), float(state.theta_dot), params.n * tau, strip.series_degree + 1,
                       ma.scal, ma.tri, tc, center)
    fact = np.array([math.factorial(j) for j in range(len(a))], dtype=float)
    return TaylorJet(a * fact)


def hem_step(state: State, strip: Strip, cfg: StepperConfig, params: ModelParams, table: HansenTable) -> State:
    """Advance by one sub-step h with the jet-based HEM in an H strip."""
    if not strip or strip.kind != "H":
        raise ValueError("hem_step needs an H strip")
    lo, hi = strip.bounds(params.n)
    if not (lo <= state.theta_dot <= hi):
        raise ValueError(f"θ̇ = {state.theta_dot} lies outside strip [{lo}, {hi}]")
    center, _, tc = _strip_taylor(strip, params, table, cfg.prune_threshold)
    ma = model_arrays(params, table)
    h = cfg.step(params)
    tau = _local_time(state.t, params.period)
    rt, rv = hem_jet_increment(float(state.theta), float(state.theta_dot), params.n * tau, strip.series_degree,
                               h, ma.scal, ma.tri, tc, center)
    return State(state.theta + state.theta_dot * h + rt, state.theta_dot + rv, state.t + h)


def rk_step_to(state: State, t_target: float, cfg: StepperConfig, params: ModelParams, fast: FastTide | None,
               table: HansenTable, *, tide: str = "fast") -> State:
    """Integrate with DOP853 to exactly ``t_target``."""
    if fast is None:
        if tide == "fast":
            raise ValueError("fast tidal evaluation requested without a FastTide")
        fast = build_fast_tide(params, table)
    return _rk_step_to(state, t_target, cfg.rk_abs_tol, cfg.rk_rel_tol, 1 if tide == "fast" else 0,
                       params.period, (*fast.model, *fast.arrays))


def poincare_map(state: State, system: SpinOrbitSystem, **kwargs) -> State:
    """One period of the hybrid HEM/RK map (see :meth:`SpinOrbitSystem.poincare_map`)."""
    return system.poincare_map(state, **kwargs)
