"""Special functions used by the Hansen coefficient series.

Bessel functions of the first kind (integer order), the gamma function and
binomial coefficients extended to arbitrary integer arguments.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["bessel_j", "bessel_j_orders", "binomial_ext", "gamma_fn"]

# Renormalisation threshold for the downward recurrence.
_BIG = 1.0e250


def _check_finite(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"Bessel argument must be finite, got {x!r}")
    return x


def _series(k: int, x: float) -> float:
    """Ascending series for J_k(x), k >= 0."""
    half = 0.5 * x
    term = 1.0
    for i in range(1, k + 1):
        term *= half / i
    total = term
    q = -half * half
    j = 0
    while True:
        j += 1
        term *= q / (j * (j + k))
        total += term
        if abs(term) <= 1e-17 * abs(total) or term == 0.0:
            break
    return total


def bessel_j_orders(nmax: int, x: float) -> np.ndarray:
    """Return ``[J_0(x), ..., J_nmax(x)]`` by Miller's backward recurrence.

    The recurrence starts well above both ``nmax`` and ``|x|`` and is
    normalised with ``J_0 + 2 * sum(J_2k) = 1``.
    """
    x = _check_finite(x)
    nmax = int(nmax)
    if nmax < 0:
        raise ValueError("nmax must be non-negative")
    out = np.zeros(nmax + 1)
    if x == 0.0:
        out[0] = 1.0
        return out
    ax = abs(x)
    start = max(nmax, int(ax)) + 30 + int(math.sqrt(40.0 * max(nmax, ax, 1.0)))
    start += start % 2
    jp1 = 0.0
    j = 1e-300
    norm = 0.0
    for m in range(start, 0, -1):
        jm1 = 2.0 * m / ax * j - jp1
        jp1, j = j, jm1
        # j now holds J_{m-1}
        if abs(j) > _BIG:
            j /= _BIG
            jp1 /= _BIG
            out /= _BIG
            norm /= _BIG
        if m - 1 <= nmax:
            out[m - 1] = j
        if (m - 1) % 2 == 0 and m - 1 > 0:
            norm += 2.0 * j
    norm += j
    out /= norm
    if x < 0.0:
        out[1::2] = -out[1::2]
    return out


def bessel_j(k: int, x: float) -> float:
    """Bessel function of the first kind J_k(x) for any integer order k."""
    x = _check_finite(x)
    k = int(k)
    sign = 1.0
    if k < 0:
        k = -k
        if k % 2:
            sign = -1.0
    if x == 0.0:
        return sign * (1.0 if k == 0 else 0.0)
    if x < 0.0:
        x = -x
        if k % 2:
            sign = -sign
    # Terms of the ascending series decrease from the first one when
    # (x/2)^2 <= k + 1, so there is no cancellation to speak of.
    if 0.25 * x * x <= k + 1:
        return sign * _series(k, x)
    return sign * float(bessel_j_orders(k, x)[k])


def binomial_ext(l: int, m: int) -> float:
    """Binomial coefficient C(l, m) for any integers: 0 if m < 0, 1 if m == 0."""
    l = int(l)
    m = int(m)
    if m < 0:
        return 0.0
    num = 1
    den = 1
    for i in range(m):
        num *= l - i
        den *= i + 1
    # a product of m consecutive integers is always divisible by m!
    return float(num // den)


def gamma_fn(x: float) -> float:
    """Gamma function for positive real arguments."""
    x = float(x)
    if not (x > 0.0) or not math.isfinite(x):
        raise ValueError(f"gamma_fn requires a finite x > 0, got {x!r}")
    return math.gamma(x)
