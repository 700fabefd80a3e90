"""Capture detection on the Poincaré-section sequence θ̇_k.

The sequence is cut into blocks of L iterates. For block j let ȳ_j be the
mean of θ̇_k/n and m_j the least-squares slope of θ̇_k against k. A block
passes when |2ȳ_j - [2ȳ_j]| < eps_i and |m_j| < eps_m; capture is declared
when K consecutive blocks pass, at the last iterate of the K-th block.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numba import njit

from .integrators import OK, IntegrationError, SpinOrbitSystem, _STATUS_TEXT, poincare_kernel
from .model import State

__all__ = [
    "CaptureConfig",
    "CaptureDecision",
    "CaptureDetector",
    "CaptureReport",
    "block_stats",
    "run_trajectory",
    "scan_blocks",
]

DEFAULT_MAX_ITERATIONS = 200_000_000

# integer detector state
D_FILL, D_RUN, D_BLOCKS, D_CAPTURED, D_ATTRACTOR, D_CAPTURE_K, D_K = range(7)
# float detector state
D_LAST_MEAN, D_LAST_SLOPE = range(2)


@dataclass(frozen=True)
class CaptureConfig:
    L: int = 10_000
    K: int = 8
    eps_i: float = 1e-3
    eps_m: float = 3e-7
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (self.eps_i > 0 and self.eps_m > 0):
            raise ValueError("eps_i and eps_m must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class CaptureReport:
    captured: bool
    attractor_2p: int | None
    capture_iteration: int | None
    blocks_processed: int
    cpu_seconds: float | None
    iterations: int = 0
    wall_seconds: float = 0.0
    hem_substeps: int = 0
    rk_substeps: int = 0
    final_state: State | None = None
    last_block: tuple[float, float] | None = None  # (mean θ̇/n, slope)
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error is not None:
            return "failed"
        return "captured" if self.captured else "uncaptured"

    @property
    def resonance(self) -> float | None:
        return None if self.attractor_2p is None else self.attractor_2p / 2

    def as_dict(self) -> dict:
        d = asdict(self)
        d["final_state"] = None if self.final_state is None else [
            self.final_state.theta, self.final_state.theta_dot, self.final_state.t
        ]
        d["status"] = self.status
        return d


class CaptureDecision(NamedTuple):
    captured: bool
    attractor_2p: int | None = None


@njit(cache=True, error_model="numpy")
def block_stats_kernel(buf, n):
    """(mean of buf/n, OLS slope of buf against its index), both two-pass."""
    L = buf.shape[0]
    s = 0.0
    for i in range(L):
        s += buf[i]
    mean = s / L
    kbar = 0.5 * (L - 1)
    sxy = 0.0
    for i in range(L):
        sxy += (i - kbar) * (buf[i] - mean)
    skk = L * (L * L - 1.0) / 12.0
    return mean / n, sxy / skk


def block_stats(samples, n: float) -> tuple[float, float]:
    """Block mean of θ̇/n and least-squares slope of θ̇ per iteration."""
    arr = np.ascontiguousarray(samples, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("need a 1-D block of at least two samples")
    return block_stats_kernel(arr, float(n))


@njit(cache=True, inline="always", error_model="numpy")
def _block_passes(mean, slope, eps_i, eps_m):
    y2 = 2.0 * mean
    return abs(y2 - math.floor(y2 + 0.5)) < eps_i and abs(slope) < eps_m


@njit(cache=True, inline="always", error_model="numpy")
def detector_update(theta_dot, buf, ist, fst, K, eps_i, eps_m, n):
    """Feed one θ̇ sample; returns True when capture is declared."""
    L = buf.shape[0]
    ist[D_K] += 1
    buf[ist[D_FILL]] = theta_dot
    ist[D_FILL] += 1
    if ist[D_FILL] < L:
        return False
    ist[D_FILL] = 0
    ist[D_BLOCKS] += 1
    mean, slope = block_stats_kernel(buf, n)
    fst[D_LAST_MEAN] = mean
    fst[D_LAST_SLOPE] = slope
    if _block_passes(mean, slope, eps_i, eps_m):
        ist[D_RUN] += 1
    else:
        ist[D_RUN] = 0
    if ist[D_RUN] >= K:
        ist[D_CAPTURED] = 1
        ist[D_ATTRACTOR] = int(math.floor(2.0 * mean + 0.5))
        ist[D_CAPTURE_K] = ist[D_K]
        return True
    return False


@njit(cache=True)
def _feed_many(values, buf, ist, fst, K, eps_i, eps_m, n):
    for i in range(values.shape[0]):
        if detector_update(values[i], buf, ist, fst, K, eps_i, eps_m, n):
            return i + 1
    return values.shape[0]


class CaptureDetector:
    """Streaming detector holding at most one partial block (O(L) memory)."""

    def __init__(self, cfg: CaptureConfig, n: float):
        self.cfg = cfg
        self.n = float(n)
        self.buf = np.zeros(cfg.L)
        self.ist = np.zeros(7, dtype=np.int64)
        self.fst = np.full(2, np.nan)

    @property
    def captured(self) -> bool:
        return bool(self.ist[D_CAPTURED])

    @property
    def attractor_2p(self) -> int | None:
        return int(self.ist[D_ATTRACTOR]) if self.captured else None

    @property
    def capture_iteration(self) -> int | None:
        return int(self.ist[D_CAPTURE_K]) if self.captured else None

    @property
    def blocks_processed(self) -> int:
        return int(self.ist[D_BLOCKS])

    @property
    def samples_seen(self) -> int:
        return int(self.ist[D_K])

    @property
    def consecutive(self) -> int:
        return int(self.ist[D_RUN])

    @property
    def last_block(self) -> tuple[float, float] | None:
        return None if self.blocks_processed == 0 else (float(self.fst[0]), float(self.fst[1]))

    def update(self, theta_dot: float) -> CaptureDecision:
        if self.captured:
            return CaptureDecision(True, self.attractor_2p)
        c = self.cfg
        if detector_update(float(theta_dot), self.buf, self.ist, self.fst, c.K, c.eps_i, c.eps_m, self.n):
            return CaptureDecision(True, self.attractor_2p)
        return CaptureDecision(False)

    def feed(self, theta_dots) -> CaptureDecision:
        """Feed many samples, stopping at capture."""
        if not self.captured:
            c = self.cfg
            arr = np.ascontiguousarray(theta_dots, dtype=float)
            _feed_many(arr, self.buf, self.ist, self.fst, c.K, c.eps_i, c.eps_m, self.n)
        return CaptureDecision(self.captured, self.attractor_2p)


def scan_blocks(theta_dots, n: float, cfg: CaptureConfig) -> tuple[bool, int | None, int | None, int]:
    """Offline equivalent of the streaming detector.

    Returns (captured, attractor_2p, capture_iteration, blocks_processed).
    """
    arr = np.asarray(theta_dots, dtype=float)
    nblocks = arr.size // cfg.L
    run = 0
    for j in range(nblocks):
        mean, slope = block_stats(arr[j * cfg.L:(j + 1) * cfg.L], n)
        y2 = 2.0 * mean
        if abs(y2 - math.floor(y2 + 0.5)) < cfg.eps_i and abs(slope) < cfg.eps_m:
            run += 1
        else:
            run = 0
        if run >= cfg.K:
            return True, int(math.floor(y2 + 0.5)), (j + 1) * cfg.L, j + 1
    return False, None, None, nblocks


# -- trajectory runner ------------------------------------------------------


@njit(cache=True)
def capture_kernel(theta, v, n_iter, stride, out, buf, ist, fst, K, eps_i, eps_m,
                   nsub, period, settings, counters, rk_h,
                   edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                   mscal, tri, tide, fscal, c1, c2):
    """Iterate the map up to n_iter times with streaming capture detection.

    Returns (θ, θ̇, iterations done, records written, status, captured).
    Records hold (k, θ_k, θ̇_k) for every k divisible by ``stride``.
    """
    work = np.empty(2 * max_mode + 2 + (ptr[:, :, 3].max() if ptr.size else 0))
    n = mscal[0]
    nrec = 0
    for i in range(n_iter):
        theta, v, status = poincare_kernel(theta, v, nsub, period, settings, counters, rk_h, work,
                                           edges, hidx, h, max_mode, hstrip, taylor, ptr, terms, coef,
                                           mscal, tri, tide, fscal, c1, c2)
        if status != OK:
            return theta, v, i, nrec, status, False
        captured = detector_update(v, buf, ist, fst, K, eps_i, eps_m, n)
        k = ist[D_K]
        if stride > 0 and k % stride == 0 and nrec < out.shape[0]:
            out[nrec, 0] = k
            out[nrec, 1] = theta
            out[nrec, 2] = v
            nrec += 1
        if captured:
            return theta, v, i + 1, nrec, OK, True
    return theta, v, n_iter, nrec, OK, False


def run_trajectory(
    system: SpinOrbitSystem,
    state: State,
    cfg: CaptureConfig | None = None,
    *,
    stride: int = 0,
    chunk: int = 1 << 20,
    cpu_unit: float | None = None,
    method: str = "hybrid",
    tide: str = "fast",
    on_records: Callable[[np.ndarray], None] | None = None,
) -> tuple[CaptureReport, np.ndarray]:
    """Iterate from ``state`` until capture or ``cfg.max_iterations``.

    ``cpu_unit`` is the duration of one CPU-sec on this machine (see
    :func:`spinorbit.montecarlo.cpu_sec_calibrate`); when given the report
    carries the process time in CPU-sec. Records (k, θ_k, θ̇_k) for every
    ``stride``-th iterate are passed to ``on_records`` chunk by chunk, or
    collected and returned when no callback is given.
    """
    cfg = cfg or CaptureConfig()
    if system._period_index(state.t) != 0:
        raise ValueError("trajectories start at t = 0")
    det = CaptureDetector(cfg, system.params.n)
    counters = np.zeros(2, dtype=np.int64)
    rk_h = np.zeros(1)
    settings = system.settings(method, tide)
    args = system.kernel_args
    theta, v = float(state.theta), float(state.theta_dot)
    done = 0
    collected = []
    error = None
    cpu0 = time.process_time()
    wall0 = time.perf_counter()
    while done < cfg.max_iterations:
        n_iter = min(chunk, cfg.max_iterations - done)
        nrec = (done + n_iter) // stride - done // stride if stride > 0 else 0
        out = np.empty((nrec, 3))
        theta, v, did, nrec, status, captured = capture_kernel(
            theta, v, n_iter, stride, out, det.buf, det.ist, det.fst, cfg.K, cfg.eps_i, cfg.eps_m,
            system.cfg.steps_per_period, system.period, settings, counters, rk_h, *args,
        )
        done += did
        if nrec:
            if on_records is not None:
                on_records(out[:nrec])
            else:
                collected.append(out[:nrec].copy())
        if status != OK:
            error = _STATUS_TEXT[status]
            break
        if captured:
            break
    cpu = time.process_time() - cpu0
    report = CaptureReport(
        captured=det.captured,
        attractor_2p=det.attractor_2p,
        capture_iteration=det.capture_iteration,
        blocks_processed=det.blocks_processed,
        cpu_seconds=None if cpu_unit is None else cpu / cpu_unit,
        iterations=done,
        wall_seconds=time.perf_counter() - wall0,
        hem_substeps=int(counters[0]),
        rk_substeps=int(counters[1]),
        final_state=State(theta, v, done * system.period),
        last_block=det.last_block,
        error=error,
    )
    records = np.concatenate(collected) if collected else np.empty((0, 3))
    return report, records
