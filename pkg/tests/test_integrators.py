import math

import numpy as np
import pytest

from spinorbit.gates import HEM_TOL_THETA, HEM_TOL_THETA_DOT, wrap_angle
from spinorbit.integrators import (
    STRIP_SKIP,
    IntegrationError,
    StepperConfig,
    build_system,
    hem_step,
    poincare_map,
    rk_step_to,
    taylor_jet,
    tide_taylor_coeffs,
)
from spinorbit.model import ModelParams, State, accel_tide_exact, accel_tri

# worst per-period HEM error reported for the reference implementation
OBSERVED_THETA = 3e-14
OBSERVED_THETA_DOT = 1.4e-13


@pytest.fixture(scope="module")
def free_system(cache_dir):
    return build_system(ModelParams(triax=0.0, mu=0.0), cache_dir=cache_dir)


@pytest.fixture(scope="module")
def conservative(cache_dir):
    return build_system(ModelParams(mu=0.0), cache_dir=cache_dir)


@pytest.fixture(scope="module")
def circular(cache_dir):
    return build_system(ModelParams(e=0.0), cache_dir=cache_dir)


def _strip_states(system, strip, rng, count):
    lo, hi = strip.bounds(system.params.n)
    return rng.uniform(0.0, 2 * math.pi, count), rng.uniform(lo, hi, count)


def test_stepper_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(steps_per_period=0)
    with pytest.raises(ValueError):
        StepperConfig(rk_abs_tol=0.0)
    with pytest.raises(ValueError):
        StepperConfig(hem_backend="other")


# -- free rotation ----------------------------------------------------------


def test_free_rotation_hem_step(free_system):
    s = free_system
    h = s.cfg.step(s.params)
    for strip in s.layout.h_strips()[::7]:
        lo, hi = strip.bounds(s.params.n)
        st = State(1.1, 0.5 * (lo + hi), 3 * h)
        out = s.hem_step(st, strip)
        assert out.theta_dot == st.theta_dot
        assert out.theta == pytest.approx(st.theta + st.theta_dot * h, abs=1e-15)
        assert out.t == pytest.approx(4 * h, abs=1e-16)


def test_free_rotation_rk_and_map(free_system):
    s = free_system
    n = s.params.n
    for v in (0.2 * n, 1.5 * n, 2.77 * n, 6.0 * n):
        st = State(0.3, v)
        out = s.rk_step_to(st, 3.7 * s.period)
        assert out.theta_dot == pytest.approx(v, abs=1e-13)
        assert out.theta == pytest.approx(0.3 + v * 3.7 * s.period, rel=1e-14)
        m = s.poincare_map(st)
        assert m.theta_dot == pytest.approx(v, abs=1e-13)
        assert wrap_angle(m.theta - (0.3 + v * s.period)) == pytest.approx(0.0, abs=1e-13)
        assert m.t == pytest.approx(s.period)


# -- one HEM sub-step against tight RK ----------------------------------------


# the fixed series degree 17 of the top band truncates at ~6e-14 in θ̇ there
_BANDS = [pytest.param(b, marks=pytest.mark.xfail(strict=True, reason="band 9 D_s=17 truncation ~6e-14"))
          if b == 9 else b for b in range(10)]


@pytest.mark.parametrize("backend", ["compiled", "jet"])
@pytest.mark.parametrize("band", _BANDS)
def test_hem_substep_accuracy(system, rng, backend, band):
    """One sub-step against RK in deviation form at 1e-17.

    Increments are compared unrounded; a 1e-15 reference scaled by the full
    θ̇ is itself off by ~1e-14 near 5n.
    """
    s = system
    worst = 0.0
    for strip in s.layout.h_strips():
        if strip.bands[0] != band:
            continue
        thetas, vs = _strip_states(s, strip, rng, 100)
        for th, v in zip(thetas, vs):
            i = int(rng.integers(0, s.cfg.steps_per_period))
            rt, rv = s.hem_increment(th, v, i, backend)
            phi, w = s.rk_increment(th, v, i, atol=1e-17, rtol=1e-17)
            worst = max(worst, abs(rt - phi), abs(rv - w))
    assert worst <= 1e-14


def test_rk_increment_matches_rk_step(system):
    h = system.hem.h
    th, v = 0.8, 2.2 * system.params.n
    phi, w = system.rk_increment(th, v, 3)
    ref = system.rk_step_to(State(th, v, 3 * h), 4 * h, tide="exact", atol=1e-15, rtol=1e-15)
    assert th + v * h + phi == pytest.approx(ref.theta, abs=1e-14)
    assert v + w == ref.theta_dot


def test_functional_hem_step_matches_system(system, params, table, rng):
    strip = system.layout.h_strips()[5]
    th, v = _strip_states(system, strip, rng, 1)
    st = State(th[0], v[0], 7 * system.hem.h)
    a = hem_step(st, strip, system.cfg, params, table)
    b = system.hem_step(st)
    assert (a.theta, a.theta_dot) == (b.theta, b.theta_dot)
    rt, rv = system.hem_increment(st.theta, st.theta_dot, 7, "compiled")
    assert st.theta + st.theta_dot * system.hem.h + rt == pytest.approx(a.theta, abs=1e-14)
    assert st.theta_dot + rv == pytest.approx(a.theta_dot, abs=1e-14)


def test_hem_step_errors(system, params, table):
    n_strip = next(s for s in system.layout.strips if s.kind == "N")
    with pytest.raises(ValueError):
        hem_step(State(0.0, 1.5 * params.n), n_strip, system.cfg, params, table)
    strip = system.layout.h_strips()[0]
    lo, hi = strip.bounds(params.n)
    with pytest.raises(ValueError):
        hem_step(State(0.0, hi + 1.0), strip, system.cfg, params, table)
    with pytest.raises(ValueError):
        system.hem_increment(0.0, 1.5 * params.n, 0)


def test_rk_step_to_errors(system, params, table):
    with pytest.raises(ValueError):
        system.rk_step_to(State(0.0, 30.0, 1.0), 1.0)
    with pytest.raises(ValueError):
        rk_step_to(State(0.0, 30.0), 0.1, system.cfg, params, None, table, tide="fast")


def test_functional_rk_matches_system(system, params, table):
    st = State(0.7, 1.37 * params.n, 0.05)
    a = rk_step_to(st, 0.3, system.cfg, params, system.fast, table)
    b = system.rk_step_to(st, 0.3)
    assert (a.theta, a.theta_dot, a.t) == (b.theta, b.theta_dot, b.t)


# -- Taylor jet -------------------------------------------------------------


def test_taylor_jet_satisfies_ode(system, params, table):
    strip = system.layout.h_strips()[10]
    lo, hi = strip.bounds(params.n)
    st = State(0.9, 0.5 * (lo + hi), 0.013)
    jet = taylor_jet(st, strip, system.cfg, params, table)
    assert jet.degree == strip.series_degree
    assert jet.coeffs[0] == st.theta and jet.coeffs[1] == st.theta_dot
    acc = accel_tri(st.theta, st.t, params, table) + accel_tide_exact(st.theta_dot, params, table)
    assert jet.coeffs[2] == pytest.approx(acc, rel=1e-12, abs=1e-14)
    # dense output of the jet solves the ODE along a short arc
    tau = 0.3 * system.hem.h
    k = np.arange(len(jet.coeffs))
    fact = np.array([math.factorial(j) for j in k], dtype=float)
    c = jet.coeffs / fact
    theta = np.polyval(c[::-1], tau)
    dc = c[1:] * k[1:]
    theta_dot = np.polyval(dc[::-1], tau)
    ddc = dc[1:] * k[1:-1]
    theta_ddot = np.polyval(ddc[:-1][::-1], tau)
    rhs = accel_tri(theta, st.t + tau, params, table) + accel_tide_exact(theta_dot, params, table)
    assert theta_ddot == pytest.approx(rhs, abs=1e-8)


def test_tide_taylor_coeffs(params, table):
    c0 = 1.23 * params.n
    coef = tide_taylor_coeffs(c0, 25, params, table)
    for d in (-0.02, 0.005, 0.03):
        v = c0 + d * params.n
        approx = np.polyval(coef[::-1], v - c0)
        assert approx == pytest.approx(accel_tide_exact(v, params, table), abs=1e-15)
    with pytest.raises(ValueError):
        tide_taylor_coeffs(1.5 * params.n, 5, params, table)


# -- Poincaré map -----------------------------------------------------------


def test_hybrid_matches_rk_per_strip(system, rng):
    """Every H strip within the gate; most within the reference figures."""
    s = system
    within_ref = 0
    strips = s.layout.h_strips()
    for strip in strips:
        et = ev = 0.0
        thetas, vs = _strip_states(s, strip, rng, 25)
        for th, v in zip(thetas, vs):
            a = s.poincare_map(State(th, v))
            b = s.poincare_map(State(th, v), method="rk", tide="exact", atol=1e-15, rtol=1e-15)
            et = max(et, abs(float(wrap_angle(a.theta - b.theta))))
            ev = max(ev, abs(a.theta_dot - b.theta_dot))
        assert et <= HEM_TOL_THETA and ev <= HEM_TOL_THETA_DOT, strip.index
        within_ref += et <= OBSERVED_THETA and ev <= OBSERVED_THETA_DOT
    assert within_ref >= 0.8 * len(strips)


def test_fast_and_exact_tide_maps_agree(system):
    n = system.params.n
    for v in (0.52 * n, 1.49 * n, 2.51 * n, 4.97 * n):
        a = system.poincare_map(State(2.0, v), method="rk")
        b = system.poincare_map(State(2.0, v), method="rk", tide="exact")
        assert abs(a.theta_dot - b.theta_dot) < 1e-12
        assert abs(wrap_angle(a.theta - b.theta)) < 1e-12


def test_map_reduces_theta_and_advances_time(system):
    st = State(6.0, 3.3 * system.params.n, 4 * system.period)
    out = poincare_map(st, system)
    assert 0.0 <= out.theta < 2 * math.pi
    assert out.t == pytest.approx(5 * system.period)
    with pytest.raises(ValueError):
        system.poincare_map(State(0.0, 30.0, 0.1))


def test_forcing_periodicity(system):
    n = system.params.n
    for v in (1.2 * n, 1.5 * n):
        a = system.poincare_map(State(0.4, v))
        b = system.poincare_map(State(0.4, v, system.period))
        assert (a.theta, a.theta_dot) == (b.theta, b.theta_dot)


def test_map_deterministic(system):
    st = State(1.0, 1.27 * system.params.n)
    a, ra = system.iterate(st, 500, stride=50)
    b, rb = system.iterate(st, 500, stride=50)
    assert (a.theta, a.theta_dot) == (b.theta, b.theta_dot)
    np.testing.assert_array_equal(ra, rb)
    assert ra[:, 0].tolist() == list(range(50, 501, 50))
    c = st
    for _ in range(500):
        c = system.poincare_map(c)
    assert (c.theta, c.theta_dot) == (a.theta, a.theta_dot)


def test_iterate_counts_substeps(system):
    counters = np.zeros(2, dtype=np.int64)
    system.iterate(State(0.0, 1.2 * system.params.n), 10, stride=0, counters=counters)
    assert counters.tolist() == [10 * system.cfg.steps_per_period, 0]
    counters[:] = 0
    system.iterate(State(0.0, 1.5 * system.params.n), 10, stride=0, counters=counters)
    assert counters[0] == 0 and counters[1] == 10 * system.cfg.steps_per_period


def test_half_turn_symmetry_circular(circular):
    """With e = 0 the forcing depends on 2θ only, so θ → θ + π commutes."""
    s = circular
    for v in (1.13 * s.params.n, 1.5 * s.params.n, 2.3 * s.params.n):
        a = s.poincare_map(State(0.6, v))
        b = s.poincare_map(State(0.6 + math.pi, v))
        assert abs(a.theta_dot - b.theta_dot) < 1e-13
        assert abs(wrap_angle(b.theta - a.theta - math.pi)) < 1e-13


def test_area_preservation_without_tide(conservative):
    """det D(P^1000) = 1 when the dissipative term vanishes.

    The determinant is accumulated along the orbit from one-period
    Jacobians; a direct difference over 1000 periods loses accuracy to the
    shear of the rotation.
    """
    s = conservative
    assert s.params.eta == 0.0
    d = 1e-3

    def step(x):
        out = s.poincare_map(State(x[0], x[1]))
        return np.array([out.theta, out.theta_dot])

    def diff(a, b):
        r = a - b
        r[0] = wrap_angle(r[0])
        return r

    for v0 in (1.2, 1.5, 2.2):
        x = np.array([0.4, v0 * s.params.n])
        logdet = 0.0
        for _ in range(1000):
            jac = np.empty((2, 2))
            for j in range(2):
                e = np.zeros(2)
                e[j] = d
                jac[:, j] = (8 * diff(step(x + e), step(x - e)) - diff(step(x + 2 * e), step(x - 2 * e))) / (12 * d)
            logdet += math.log(np.linalg.det(jac))
            x = step(x)
        assert abs(math.expm1(logdet)) < 1e-6


def test_strip_skip_is_reported(system):
    """A layout of needle-thin strips forces a multi-strip jump."""
    from spinorbit.integrators import SpinOrbitSystem, StripArrays

    s = system
    edges = np.linspace(1.0 * s.params.n, 1.1 * s.params.n, 200_001)
    hidx = np.full(200_000, -1, dtype=np.int64)
    thin = SpinOrbitSystem(s.params, s.table, s.layout, s.cfg, s.fast, s.hem)
    thin.strips = StripArrays(edges=edges, hidx=hidx)
    with pytest.raises(IntegrationError) as info:
        thin.poincare_map(State(0.0, 1.05 * s.params.n))
    assert info.value.status == STRIP_SKIP
    assert info.value.state is not None
