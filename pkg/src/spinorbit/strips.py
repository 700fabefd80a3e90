"""Partition of θ̇ ∈ [0, 5n] into HEM (H) and numerical (N) strips.

Geometry is held as exact rationals in units of θ̇/n; scaling by n happens
only when a float boundary is needed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from fractions import Fraction as Fr
from typing import Literal

import numpy as np

__all__ = [
    "BAND_SERIES_DEGREE",
    "OUTSIDE",
    "Strip",
    "StripLayout",
    "default_layout",
    "locate",
]

BAND_SERIES_DEGREE = (16, 15, 15, 14, 14, 14, 15, 16, 17, 17)
TIDE_TAYLOR_DEGREE = 25
N_HALFWIDTH = Fr(3, 100)


class _Outside:
    __slots__ = ()

    def __repr__(self):
        return "OUTSIDE"

    def __bool__(self):
        return False


OUTSIDE = _Outside()


@dataclass(frozen=True)
class Strip:
    """One strip; ``lo``/``hi`` are in units of θ̇/n."""

    index: int
    kind: Literal["H", "N"]
    lo: Fr
    hi: Fr
    bands: tuple[int, ...]
    center: Fr | None = None
    taylor_degree_tide: int | None = None
    series_degree: int | None = None

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"empty strip [{self.lo}, {self.hi}]")
        if self.kind == "H" and self.center != (self.lo + self.hi) / 2:
            raise ValueError("H strip must expand about its midpoint")

    @property
    def width(self) -> Fr:
        return self.hi - self.lo

    def bounds(self, n: float) -> tuple[float, float]:
        return float(self.lo) * n, float(self.hi) * n

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "range": [float(self.lo), float(self.hi)],
            "range_exact": [str(self.lo), str(self.hi)],
            "center": None if self.center is None else float(self.center),
            "bands": list(self.bands),
            "taylor_degree_tide": self.taylor_degree_tide,
            "series_degree": self.series_degree,
        }


@dataclass(frozen=True)
class StripLayout:
    strips: tuple[Strip, ...]
    bands: tuple[tuple[int, ...], ...]  # strip indices per band
    n: float

    def __post_init__(self):
        object.__setattr__(self, "_edges", tuple(float(s.lo) * self.n for s in self.strips))

    @property
    def lo(self) -> Fr:
        return self.strips[0].lo

    @property
    def hi(self) -> Fr:
        return self.strips[-1].hi

    def edges(self) -> np.ndarray:
        """Float boundaries θ̇ [rad/yr], length len(strips) + 1."""
        return np.array([float(s.lo) * self.n for s in self.strips] + [float(self.hi) * self.n])

    def locate_index(self, theta_dot: float) -> int:
        """Strip index, or -1 when θ̇ lies outside the layout."""
        lo = self._edges[0]
        hi = float(self.hi) * self.n
        if not (lo <= theta_dot <= hi):
            return -1
        if theta_dot == hi:
            return len(self.strips) - 1
        return bisect.bisect_right(self._edges, theta_dot) - 1

    def locate(self, theta_dot: float):
        i = self.locate_index(theta_dot)
        return OUTSIDE if i < 0 else self.strips[i]

    def h_strips(self) -> list[Strip]:
        return [s for s in self.strips if s.kind == "H"]

    def h_fraction(self) -> Fr:
        return sum((s.width for s in self.h_strips()), Fr(0)) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "strips": [s.as_dict() for s in self.strips],
            "bands": [list(b) for b in self.bands],
        }


def _band_h_edges(band: int) -> list[Fr]:
    if band == 0:
        return [Fr(0), Fr(20, 100), Fr(35, 100), Fr(43, 100), Fr(47, 100)]
    if band == 9:
        k = Fr(9, 2)
        return [k + Fr(3, 100), k + Fr(7, 100), k + Fr(15, 100), k + Fr(30, 100), k + Fr(50, 100)]
    lo = Fr(band, 2) + N_HALFWIDTH
    return [lo + Fr(d, 100) for d in (0, 3, 9, 29, 41, 44)]


def default_layout(n: float) -> StripLayout:
    """Ten bands between consecutive kinks, 48 H strips and 9 N strips."""
    if not n > 0:
        raise ValueError("n must be positive")
    pieces: list[tuple[str, Fr, Fr, tuple[int, ...]]] = []
    for band in range(10):
        if band > 0:
            kink = Fr(band, 2)
            pieces.append(("N", kink - N_HALFWIDTH, kink + N_HALFWIDTH, (band - 1, band)))
        edges = _band_h_edges(band)
        for lo, hi in zip(edges[:-1], edges[1:]):
            pieces.append(("H", lo, hi, (band,)))
    strips = []
    for i, (kind, lo, hi, bands) in enumerate(pieces):
        if kind == "H":
            strips.append(
                Strip(i, "H", lo, hi, bands, (lo + hi) / 2, TIDE_TAYLOR_DEGREE, BAND_SERIES_DEGREE[bands[0]])
            )
        else:
            strips.append(Strip(i, "N", lo, hi, bands))
    bands = tuple(tuple(s.index for s in strips if b in s.bands) for b in range(10))
    layout = StripLayout(tuple(strips), bands, float(n))
    _check_tiling(layout)
    return layout


def _check_tiling(layout: StripLayout) -> None:
    s = layout.strips
    if s[0].lo != 0 or s[-1].hi != 5:
        raise AssertionError("layout must span [0, 5]")
    for a, b in zip(s[:-1], s[1:]):
        if a.hi != b.lo:
            raise AssertionError(f"gap or overlap between strips {a.index} and {b.index}")


def locate(theta_dot: float, layout: StripLayout):
    """Strip containing θ̇ (left-closed, right-open; last strip closed) or OUTSIDE."""
    return layout.locate(theta_dot)
