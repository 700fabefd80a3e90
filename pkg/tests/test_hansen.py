import warnings

import numpy as np
import pytest

from spinorbit.hansen import (
    G_MAX,
    HansenConvergenceWarning,
    build_g20_table,
    hansen_x,
    hansen_x_quadrature,
    kepler_eccentric_anomaly,
)
from spinorbit.model import ModelParams

# G_20q(e) by mpmath quadrature over the eccentric anomaly (40 digits), frozen
ORACLE = {
    0.2056: {-4: 7.67309850222468752805e-05, -3: 1.864876554845564588467e-04, -2: 0.0,
             -1: -0.1022617212938065696311, 0: 0.8957642211314380549952, 1: 0.6541781933638055055882,
             2: 0.3259914728121644342403, 3: 0.1379563451786468977357, 4: 0.05325185283063802801809,
             5: 0.01937394739642890587196, 6: 0.00676305416721318235596, 7: 0.002289847474273236667788},
    0.3: {-4: 3.603678915548495624365e-04, -3: 5.996935102205512334673e-04, -2: 0.0,
          -1: -0.1483459682893626468628, 0: 0.7814919998843035258058, 1: 0.8515341671904901257315,
          2: 0.6186224379772481808054, 3: 0.3795468140806866085835, 4: 0.2119353889307788553632,
          5: 0.1114164872220202337974, 6: 0.05616402157472715731207, 7: 0.02744919285966320849297},
    0.4: {-4: 1.203179072024614952558e-03, -3: 1.498965216109296544307e-03, -2: 0.0,
          -1: -0.196147901783648696688, 0: 0.6202948879847087353935, 1: 0.9457299610596503811282,
          2: 0.9180999737186124662565, 3: 0.7450377290687562952404, 4: 0.5480768086338977568307,
          5: 0.3788424116347614130759, 6: 0.2508131980519809117727, 7: 0.1608785425501580119053},
}


def test_circular_orbit_limits():
    assert hansen_x(0, -3, 2, 0.0) == 0.0
    assert hansen_x(2, -3, 2, 0.0) == 1.0


def test_single_coefficient_against_quadrature():
    assert abs(hansen_x(3, -3, 2, 0.2056, 120) - hansen_x_quadrature(3, -3, 2, 0.2056)) <= 1e-12


@pytest.mark.parametrize("e", sorted(ORACLE))
def test_table_against_frozen_oracle(e):
    table = build_g20_table(e)
    for q, ref in ORACLE[e].items():
        assert abs(table[q] - ref) <= 1e-12, q


@pytest.mark.parametrize("e", sorted(ORACLE))
def test_table_against_runtime_quadrature(e):
    table = build_g20_table(e)
    for q in range(-4, 8):
        assert abs(table[q] - hansen_x_quadrature(q + 2, -3, 2, e)) <= 1e-12


def test_sign_structure_and_zero_mode():
    table = build_g20_table(0.2056)
    assert abs(table[-2]) <= 1e-12
    negative = [q for q in range(-12, 13) if q != -2 and table[q] < 0]
    assert negative == [-1]
    assert table.negative_q == (-1,)


def test_circular_table_is_kronecker_delta():
    table = build_g20_table(0.0)
    for q in range(-12, 13):
        assert abs(table[q] - (1.0 if q == 0 else 0.0)) <= 1e-14


def test_tail_decays_monotonically():
    table = build_g20_table(0.2056)
    tail = [abs(table[q]) for q in range(3, 13)]
    assert all(a > b for a, b in zip(tail, tail[1:]))


@pytest.mark.parametrize("e,expected", [(0.2056, 0.2096), (0.3, 0.3016), (0.4, 0.4396)])
def test_triaxial_bound(e, expected):
    p = ModelParams()
    table = build_g20_table(e)
    d = p.zeta * sum(abs(table[q]) for q in p.Q_TRI)
    assert abs(d - expected) <= 5e-4


def test_table_covers_required_modes():
    table = build_g20_table(0.2056)
    assert table.covers(range(-4, 8))
    with pytest.raises(ValueError):
        build_g20_table(0.2056, (-3, 7))


@pytest.mark.parametrize("e", [-0.1, 1.0, 1.5, float("nan")])
def test_eccentricity_domain(e):
    with pytest.raises(ValueError):
        hansen_x(2, -3, 2, e)
    with pytest.raises(ValueError):
        build_g20_table(e)


def test_truncation_warning():
    with pytest.warns(HansenConvergenceWarning):
        hansen_x(3, -3, 2, 0.4, g_max=3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        hansen_x(3, -3, 2, 0.4, g_max=G_MAX)


def test_kepler_solution_residual(rng):
    M = rng.uniform(0, 2 * np.pi, 1000)
    for e in (0.0, 0.2056, 0.9):
        E = kepler_eccentric_anomaly(M, e)
        assert np.max(np.abs(E - e * np.sin(E) - M)) <= 1e-14


def test_table_is_immutable():
    table = build_g20_table(0.2056)
    with pytest.raises(TypeError):
        table.g20[0] = 1.0
