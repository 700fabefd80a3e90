"""Timings of the map in H and N strips and of single tidal evaluations."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .fasteval import tide_fast_kernel
from .integrators import SpinOrbitSystem, poincare_kernel
from .model import tide_exact_kernel
from .montecarlo import cpu_sec_calibrate

__all__ = ["BenchReport", "run_bench", "time_maps", "time_tide_evals"]

BENCH_ITERATIONS = 100_000


@njit(cache=True)
def _map_cycle(states, n_iter, nsub, period, settings, counters, rk_h,
               edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
               mscal, tri, tide, fscal, c1, c2):
    # maps from a fixed cycle of start states so the timing stays in one strip
    work = np.empty(2 * max_mode + 2 + (ptr[:, :, 3].max() if ptr.size else 0))
    acc = 0.0
    m = states.shape[0]
    for i in range(n_iter):
        th, v, status = poincare_kernel(states[i % m, 0], states[i % m, 1], nsub, period, settings,
                                        counters, rk_h, work, edges, hidx, h, max_mode, hstrip,
                                        taylor, ptr, terms, coef, mscal, tri, tide, fscal, c1, c2)
        acc += v
    return acc


@njit(cache=True, error_model="numpy")
def _fast_chain(xs, mscal, tri, tide, fscal, c1, c2):
    s = 0.0
    for x in xs:
        s += tide_fast_kernel(x + s * 1e-300, mscal, tri, tide, fscal, c1, c2)[0]
    return s


@njit(cache=True, error_model="numpy")
def _exact_chain(xs, mscal, tide):
    s = 0.0
    for x in xs:
        s += tide_exact_kernel(x + s * 1e-300, mscal, tide)
    return s


def _best(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.process_time()
        fn()
        best = min(best, time.process_time() - t0)
    return best


def time_maps(system: SpinOrbitSystem, v_over_n: float, method: str, tide: str,
              n_iter: int = BENCH_ITERATIONS, repeats: int = 3, seed: int = 0) -> tuple[float, np.ndarray]:
    """Best-of process time (s) for n_iter maps started near θ̇ = v_over_n·n."""
    n = system.params.n
    rng = np.random.default_rng(seed)
    states = np.column_stack([rng.uniform(0, 2 * np.pi, 64), n * (v_over_n + rng.uniform(-1e-3, 1e-3, 64))])
    settings = system.settings(method, tide)
    counters = np.zeros(2, dtype=np.int64)
    args = (system.cfg.steps_per_period, system.period, settings, counters, np.zeros(1), *system.kernel_args)
    _map_cycle(states, 2, *args)
    counters[:] = 0
    t = _best(lambda: _map_cycle(states, n_iter, *args), repeats)
    return t, counters // repeats


def time_tide_evals(system: SpinOrbitSystem, samples: int = 1_000_000, repeats: int = 5,
                    seed: int = 0) -> tuple[float, float]:
    """Per-call seconds of the fast and exact tidal evaluation, chained."""
    xs = np.random.default_rng(seed).uniform(0.0, 5.0 * system.params.n, samples)
    model, fast = system.model, system.fast.arrays
    _fast_chain(xs[:2], *model, *fast)
    _exact_chain(xs[:2], model.scal, model.tide)
    tf = _best(lambda: _fast_chain(xs, *model, *fast), repeats)
    te = _best(lambda: _exact_chain(xs, model.scal, model.tide), repeats)
    return tf / samples, te / samples


@dataclass
class BenchReport:
    cpu_unit: float
    cpu_unit_repeat: float
    hem: float  # CPU-sec per 1e5 iterations
    rk_fast: float
    rk_exact: float
    eval_fast_ns: float
    eval_exact_ns: float
    hem_strip: float
    n_strip: float

    @property
    def calibration_drift(self) -> float:
        return abs(self.cpu_unit_repeat - self.cpu_unit) / self.cpu_unit

    @property
    def ratios(self) -> dict:
        return {
            "rk_fast_over_hem": self.rk_fast / self.hem,
            "rk_exact_over_rk_fast": self.rk_exact / self.rk_fast,
            "eval_exact_over_fast": self.eval_exact_ns / self.eval_fast_ns,
        }

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("cpu_unit_seconds", self.cpu_unit),
            ("cpu_unit_seconds_repeat", self.cpu_unit_repeat),
            ("hem_cpu_sec_per_1e5", self.hem),
            ("rk_fast_cpu_sec_per_1e5", self.rk_fast),
            ("rk_exact_cpu_sec_per_1e5", self.rk_exact),
            ("eval_fast_ns", self.eval_fast_ns),
            ("eval_exact_ns", self.eval_exact_ns),
            *self.ratios.items(),
        ]


def run_bench(system: SpinOrbitSystem, n_iter: int = BENCH_ITERATIONS, hem_strip: float = 1.2,
              n_strip: float = 1.5, repeats: int = 3) -> BenchReport:
    """Table-style timings in calibrated CPU-sec per 1e5 iterations.

    H-strip timings start near ``hem_strip``·n, N-strip timings near the
    3/2 kink (``n_strip``·n).
    """
    unit = cpu_sec_calibrate(repeats=3)
    scale = 1e5 / n_iter / unit
    hem, _ = time_maps(system, hem_strip, "hybrid", "fast", n_iter, repeats)
    rkf, _ = time_maps(system, n_strip, "hybrid", "fast", n_iter, repeats)
    rke, _ = time_maps(system, n_strip, "hybrid", "exact", n_iter, repeats)
    ef, ee = time_tide_evals(system)
    unit2 = cpu_sec_calibrate(repeats=3)
    return BenchReport(unit, unit2, hem * scale, rkf * scale, rke * scale, ef * 1e9, ee * 1e9,
                       hem_strip, n_strip)
