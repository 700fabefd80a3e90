from fractions import Fraction as Fr

import numpy as np
import pytest

from spinorbit.strips import BAND_SERIES_DEGREE, OUTSIDE, Strip, default_layout, locate


@pytest.fixture(scope="module")
def layout(params):
    return default_layout(params.n)


def test_tiling_is_exact(layout):
    assert layout.strips[0].lo == 0 and layout.strips[-1].hi == 5
    for a, b in zip(layout.strips, layout.strips[1:]):
        assert a.hi == b.lo
    assert sum((s.width for s in layout.strips), Fr(0)) == 5


def test_kinks_inside_n_strips(layout):
    for q in range(-1, 8):
        k = Fr(q + 2, 2)
        s = next(s for s in layout.strips if s.lo < k < s.hi)
        assert s.kind == "N"
        if k < 5:
            assert (s.lo, s.hi) == (k - Fr(3, 100), k + Fr(3, 100)) or s.hi == 5


def test_band_zero_structure(layout):
    band0 = [layout.strips[i] for i in layout.bands[0]]
    h = [s for s in band0 if s.kind == "H"]
    assert [s.center for s in h] == [Fr(1, 10), Fr(275, 1000), Fr(39, 100), Fr(45, 100)]
    assert [s.width for s in h] == [Fr(2, 10), Fr(15, 100), Fr(8, 100), Fr(4, 100)]
    n_strip = [s for s in band0 if s.kind == "N"]
    # one N strip straddles the 1/2 kink, so band 0's [0.47, 0.5] is its lower half
    assert [(s.lo, s.hi) for s in n_strip] == [(Fr(47, 100), Fr(53, 100))]
    assert n_strip[0].index in layout.bands[1]


def test_band_counts(layout):
    assert len(layout.bands) == 10
    for b, idx in enumerate(layout.bands):
        kinds = [layout.strips[i].kind for i in idx]
        if b in (0, 9):
            assert (kinds.count("H"), kinds.count("N")) == (4, 1)
        else:
            assert (kinds.count("H"), kinds.count("N")) == (5, 2)


def test_h_fraction(layout):
    assert layout.h_fraction() >= Fr(88, 100)


def test_series_degrees(layout):
    assert BAND_SERIES_DEGREE[4] == 14
    for b, idx in enumerate(layout.bands):
        for i in idx:
            s = layout.strips[i]
            if s.kind == "H":
                assert s.series_degree == BAND_SERIES_DEGREE[b]
                assert s.taylor_degree_tide == 25
                assert s.center == (s.lo + s.hi) / 2


def test_three_halves_strip(layout, params):
    s = layout.locate(1.5 * params.n)
    assert (s.kind, s.lo, s.hi) == ("N", Fr(147, 100), Fr(153, 100))


def test_locate_examples(layout, params):
    n = params.n
    s = locate(0.47 * n, layout)
    assert s.kind == "N" and s.lo == Fr(47, 100)
    assert locate(-0.2 * n, layout) is OUTSIDE
    assert not locate(5.1 * n, layout)
    assert locate(2.0 * n, layout).kind == "N"
    assert locate(5.0 * n, layout) is layout.strips[-1]


def test_locate_midpoints(layout, params):
    for s in layout.strips:
        assert layout.locate(float((s.lo + s.hi) / 2) * params.n) is s


def test_locate_is_left_closed(layout, params):
    for s in layout.strips[1:]:
        assert layout.locate(float(s.lo) * params.n).index in (s.index, s.index - 1)
    edges = layout.edges()
    assert np.all(np.diff(edges) > 0)


def test_strip_invariants():
    with pytest.raises(ValueError):
        Strip(0, "N", Fr(1), Fr(1), (0,))
    with pytest.raises(ValueError):
        Strip(0, "H", Fr(0), Fr(1), (0,), center=Fr(1, 3))


def test_layout_dict(layout):
    d = layout.to_dict()
    assert len(d["strips"]) == len(layout.strips) and len(d["bands"]) == 10
