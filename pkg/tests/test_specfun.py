import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinorbit.specfun import bessel_j, bessel_j_orders, binomial_ext, gamma_fn

# 25-digit values from mpmath at 40 digits, frozen
J1_AT_1 = 0.4400505857449335159596822
J5_AT_3_7 = 0.09948541700833389171783522
GAMMA_1_2 = 0.9181687423997606106409517


def test_bessel_trivial_values():
    assert bessel_j(0, 0.0) == 1.0
    assert bessel_j(3, 0.0) == 0.0


def test_bessel_against_frozen_oracle():
    assert abs(bessel_j(1, 1.0) - J1_AT_1) <= 1e-15
    assert abs(bessel_j(5, 3.7) - J5_AT_3_7) <= 1e-15


def test_bessel_against_mpmath_in_use_range(rng):
    mpmath = pytest.importorskip("mpmath")
    for _ in range(200):
        k = int(rng.integers(-40, 41))
        x = float(rng.uniform(-20, 20))
        assert abs(bessel_j(k, x) - float(mpmath.besselj(k, x))) <= 1e-15


def test_bessel_orders_match_scalar():
    orders = bessel_j_orders(30, 4.2)
    for k in range(31):
        assert orders[k] == pytest.approx(bessel_j(k, 4.2), abs=1e-16)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 20), st.floats(-10, 10, allow_nan=False))
def test_bessel_reflection(k, x):
    assert abs(bessel_j(-k, x) + (-1) ** (k + 1) * bessel_j(k, x)) <= 1e-15


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 39), st.floats(0.05, 20))
def test_bessel_three_term_recurrence(k, x):
    resid = bessel_j(k - 1, x) + bessel_j(k + 1, x) - (2 * k / x) * bessel_j(k, x)
    assert abs(resid) <= 1e-12


def test_bessel_rejects_non_finite():
    with pytest.raises(ValueError):
        bessel_j(1, math.inf)
    with pytest.raises(ValueError):
        bessel_j(1, math.nan)


def test_binomial_examples():
    assert binomial_ext(3, 2) == 3
    assert binomial_ext(-3, 2) == 6
    assert binomial_ext(5, 0) == 1
    for l in (-7, 0, 4, 11):
        assert binomial_ext(l, -1) == 0


def test_binomial_matches_pascal_triangle():
    for l in range(13):
        for m in range(l + 1):
            assert binomial_ext(l, m) == math.comb(l, m)


def test_binomial_beyond_top_row_is_zero():
    assert binomial_ext(3, 5) == 0


def test_gamma_values():
    assert gamma_fn(1.0) == 1.0
    assert gamma_fn(2.0) == 1.0
    assert abs(gamma_fn(1.2) - GAMMA_1_2) <= 1e-14 * GAMMA_1_2


@pytest.mark.parametrize("x", [0.0, -1.0, math.inf, math.nan])
def test_gamma_domain(x):
    with pytest.raises(ValueError):
        gamma_fn(x)
