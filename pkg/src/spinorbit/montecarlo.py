"""Seeded Monte Carlo estimation of capture probabilities.

Every initial condition is addressed by (seed, index) so the outcome of a
trajectory does not depend on which worker ran it. Results are merged in
index order, which makes the aggregate independent of completion order.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .capture import CaptureConfig, run_trajectory
from .integrators import SpinOrbitSystem, build_system
from .model import ModelParams, State

__all__ = [
    "CALIBRATION_TERMS",
    "CampaignConfig",
    "Domain",
    "ProbabilityReport",
    "TrajectoryResult",
    "aggregate",
    "calibration_sum",
    "confidence_halfwidth",
    "cpu_sec_calibrate",
    "default_domain",
    "run_campaign",
    "sample_initial",
    "write_report_json",
    "write_trajectories_csv",
]

CALIBRATION_TERMS = 59_600_000
HISTOGRAM_BIN = 200.0
Z95 = 1.96


# -- CPU-sec unit -----------------------------------------------------------


@njit(cache=True)
def calibration_sum(m):
    """S(m) = Σ_{i=1}^m (i+1)(i+3) / (i(i+2)(i+4)(i+6)), summed in order."""
    s = 0.0
    for k in range(1, m + 1):
        i = float(k)
        s += ((i + 1.0) * (i + 3.0)) / (i * (i + 2.0) * (i + 4.0) * (i + 6.0))
    return s


def cpu_sec_calibrate(terms: int = CALIBRATION_TERMS, repeats: int = 1) -> float:
    """Process-CPU seconds taken by one CPU-sec (the time to evaluate S(N_c)).

    With ``repeats`` > 1 the fastest of several timings is returned.
    """
    calibration_sum(1)  # compile outside the timed region
    best = math.inf
    for _ in range(max(1, repeats)):
        t0 = time.process_time()
        calibration_sum(terms)
        best = min(best, time.process_time() - t0)
    return max(best, 1e-9)


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    theta_lo: float
    theta_hi: float
    theta_dot_lo: float
    theta_dot_hi: float

    def __post_init__(self):
        if not (self.theta_hi > self.theta_lo and self.theta_dot_hi > self.theta_dot_lo):
            raise ValueError("empty sampling domain")


def default_domain(n: float) -> Domain:
    """Q = [0, π] × [0, 5n]."""
    return Domain(0.0, math.pi, 0.0, 5.0 * n)


@dataclass(frozen=True)
class CampaignConfig:
    I: int
    seed: int = 0
    workers: int = 1
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    domain: Domain | None = None
    method: str = "hybrid"
    tide: str = "fast"
    checkpoint_every: int = 50
    recalibrate: bool = True

    def __post_init__(self):
        if self.I < 1:
            raise ValueError("I must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def resolved_domain(self, n: float) -> Domain:
        return self.domain or default_domain(n)

    def identity(self, n: float) -> dict:
        """Fields that determine trajectory outcomes (used to validate resumes)."""
        return {
            "I": self.I,
            "seed": self.seed,
            "capture": asdict(self.capture),
            "domain": asdict(self.resolved_domain(n)),
            "method": self.method,
            "tide": self.tide,
        }


def sample_initial(seed: int, index: int, domain: Domain) -> State:
    """Uniform draw over the domain, fully determined by (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    u, w = rng.random(2)
    theta = domain.theta_lo + u * (domain.theta_hi - domain.theta_lo)
    theta_dot = domain.theta_dot_lo + w * (domain.theta_dot_hi - domain.theta_dot_lo)
    return State(float(theta), float(theta_dot), 0.0)


# -- per-trajectory results -------------------------------------------------


@dataclass
class TrajectoryResult:
    index: int
    theta0: float
    theta_dot0: float
    status: str  # captured | uncaptured | failed
    attractor_2p: int | None
    capture_iteration: int | None
    iterations: int
    cpu_sec: float
    hem_substeps: int
    rk_substeps: int
    error: str | None = None

    def outcome(self) -> tuple:
        """Everything except timing; identical across worker counts."""
        return (self.index, self.theta0, self.theta_dot0, self.status, self.attractor_2p,
                self.capture_iteration, self.iterations, self.hem_substeps, self.rk_substeps)


_WORKER: dict = {}


def _init_worker(system, cfg, states=None):
    _WORKER["system"] = system
    _WORKER["cfg"] = cfg
    _WORKER["states"] = states
    _WORKER["unit"] = cpu_sec_calibrate()


def _run_index(index: int) -> TrajectoryResult:
    system: SpinOrbitSystem = _WORKER["system"]
    cfg: CampaignConfig = _WORKER["cfg"]
    states = _WORKER["states"]
    if states is not None:
        x0 = states[index]
    else:
        x0 = sample_initial(cfg.seed, index, cfg.resolved_domain(system.params.n))
    try:
        rep, _ = run_trajectory(system, x0, cfg.capture, cpu_unit=_WORKER["unit"],
                                method=cfg.method, tide=cfg.tide)
    except Exception as exc:  # recorded per trajectory, never fatal to the campaign
        return TrajectoryResult(index, x0.theta, x0.theta_dot, "failed", None, None, 0,
                                0.0, 0, 0, f"{type(exc).__name__}: {exc}")
    if rep.captured and cfg.recalibrate:
        _WORKER["unit"] = cpu_sec_calibrate()
    return TrajectoryResult(index, x0.theta, x0.theta_dot, rep.status, rep.attractor_2p,
                            rep.capture_iteration, rep.iterations, float(rep.cpu_seconds),
                            rep.hem_substeps, rep.rk_substeps, rep.error)


# -- aggregation ------------------------------------------------------------


def confidence_halfwidth(p_hat: float, I: int) -> float:
    """95% normal-approximation half width 1.96·sqrt(p̂(1-p̂)/I)."""
    return Z95 * math.sqrt(p_hat * (1.0 - p_hat) / I)


@dataclass
class ProbabilityReport:
    I: int
    counts: dict[int, int]
    p_hat: dict[int, float]
    delta_p: dict[int, float]
    uncaptured: int
    failed: int
    timing: dict
    histogram: dict
    hem_substeps: int
    rk_substeps: int
    substeps_per_period: int

    @property
    def effective_I(self) -> int:
        """Trajectories carrying probability mass (failures excluded)."""
        return self.I - self.failed

    @property
    def uncaptured_fraction(self) -> float:
        return self.uncaptured / self.effective_I if self.effective_I else 0.0

    @property
    def hem_fraction(self) -> float:
        total = self.hem_substeps + self.rk_substeps
        return self.hem_substeps / total if total else 0.0

    def table(self) -> list[tuple[str, int, float, float]]:
        """Rows (resonance p/q, count, p̂ %, Δp %) sorted by attractor."""
        rows = []
        for a in sorted(self.counts):
            label = f"{a // 2}" if a % 2 == 0 else f"{a}/2"
            rows.append((label, self.counts[a], 100 * self.p_hat[a], 100 * self.delta_p[a]))
        return rows

    def as_dict(self) -> dict:
        return {
            "I": self.I,
            "effective_I": self.effective_I,
            "attractors": [
                {"attractor_2p": a, "resonance": a / 2, "count": self.counts[a],
                 "p_hat": self.p_hat[a], "delta_p": self.delta_p[a]}
                for a in sorted(self.counts)
            ],
            "uncaptured": self.uncaptured,
            "uncaptured_fraction": self.uncaptured_fraction,
            "failed": self.failed,
            "timing_cpu_sec": self.timing,
            "histogram": self.histogram,
            "strip_substeps": {
                "hem": self.hem_substeps,
                "rk": self.rk_substeps,
                "per_period": self.substeps_per_period,
                "hem_fraction": self.hem_fraction,
            },
        }


def _histogram(times: np.ndarray, width: float) -> dict:
    if times.size == 0:
        return {"bin_width": width, "edges": [0.0], "counts": [], "fractions": []}
    nb = max(1, int(math.ceil(times.max() / width)))
    edges = np.arange(nb + 1) * width
    counts, _ = np.histogram(times, bins=edges)
    return {
        "bin_width": width,
        "edges": edges.tolist(),
        "counts": counts.tolist(),
        "fractions": (counts / times.size).tolist(),
    }


def aggregate(results: Iterable[TrajectoryResult], substeps_per_period: int = 24) -> ProbabilityReport:
    """Deterministic merge of trajectory results (order independent)."""
    res = sorted(results, key=lambda r: r.index)
    I = len(res)
    if I == 0:
        raise ValueError("no results to aggregate")
    counts: dict[int, int] = {}
    for r in res:
        if r.status == "captured":
            counts[r.attractor_2p] = counts.get(r.attractor_2p, 0) + 1
    failed = sum(r.status == "failed" for r in res)
    uncaptured = sum(r.status == "uncaptured" for r in res)
    n_eff = I - failed
    p_hat = {a: c / n_eff for a, c in counts.items()}
    delta = {a: confidence_halfwidth(p, n_eff) for a, p in p_hat.items()}
    times = np.array([r.cpu_sec for r in res if r.status == "captured"])
    timing = {}
    if times.size:
        timing = {
            "mean": float(times.mean()),
            "sd": float(times.std(ddof=1)) if times.size > 1 else 0.0,
            "min": float(times.min()),
            "max": float(times.max()),
        }
    return ProbabilityReport(
        I=I,
        counts=counts,
        p_hat=p_hat,
        delta_p=delta,
        uncaptured=uncaptured,
        failed=failed,
        timing=timing,
        histogram=_histogram(times, HISTOGRAM_BIN),
        hem_substeps=sum(r.hem_substeps for r in res),
        rk_substeps=sum(r.rk_substeps for r in res),
        substeps_per_period=substeps_per_period,
    )


# -- checkpointing ----------------------------------------------------------


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1))
    os.replace(tmp, path)


def _load_checkpoint(path: Path, identity: dict) -> dict[int, TrajectoryResult]:
    if not path.exists():
        return {}
    data = json.loads(path.read_text())
    if data.get("identity") != json.loads(json.dumps(identity)):
        raise ValueError(f"checkpoint {path} belongs to a different campaign")
    return {r["index"]: TrajectoryResult(**r) for r in data["results"]}


def _save_checkpoint(path: Path, identity: dict, done: dict[int, TrajectoryResult]) -> None:
    _write_json_atomic(path, {
        "identity": identity,
        "results": [asdict(done[i]) for i in sorted(done)],
    })


# -- driver -----------------------------------------------------------------


def run_campaign(
    cfg: CampaignConfig,
    system: SpinOrbitSystem | None = None,
    *,
    params: ModelParams | None = None,
    cache_dir: str | Path | None = None,
    checkpoint: str | Path | None = None,
    progress: Callable[[int, int], None] | None = None,
    initial_states: Sequence[State] | None = None,
) -> tuple[ProbabilityReport, list[TrajectoryResult]]:
    """Run I seeded trajectories and aggregate capture probabilities.

    ``initial_states`` replaces the random draws with an explicit list of
    length I (each at t = 0). With ``checkpoint`` set, completed trajectories
    are saved every ``cfg.checkpoint_every`` results and skipped when the
    campaign is rerun.
    """
    system = system or build_system(params, cache_dir=cache_dir)
    identity = cfg.identity(system.params.n)
    identity["params"] = system.params.raw()
    states = None
    if initial_states is not None:
        states = [State(float(x.theta), float(x.theta_dot), 0.0) for x in initial_states]
        if len(states) != cfg.I:
            raise ValueError(f"{len(states)} initial states given for I = {cfg.I}")
        identity["initial_states"] = [[x.theta, x.theta_dot] for x in states]
    ckpt = Path(checkpoint) if checkpoint is not None else None
    done = _load_checkpoint(ckpt, identity) if ckpt else {}
    todo = [i for i in range(cfg.I) if i not in done]
    since = 0

    def record(r: TrajectoryResult):
        nonlocal since
        done[r.index] = r
        since += 1
        if ckpt and since >= cfg.checkpoint_every:
            _save_checkpoint(ckpt, identity, done)
            since = 0
        if progress:
            progress(len(done), cfg.I)

    if cfg.workers == 1 or len(todo) <= 1:
        _init_worker(system, cfg, states)
        try:
            for i in todo:
                record(_run_index(i))
        finally:
            _WORKER.clear()
    else:
        # fork shares the built system copy-on-write with every worker
        ctx = mp.get_context("fork")
        with ctx.Pool(cfg.workers, initializer=_init_worker, initargs=(system, cfg, states)) as pool:
            for r in pool.imap_unordered(_run_index, todo, chunksize=1):
                record(r)
    if ckpt:
        _save_checkpoint(ckpt, identity, done)
    results = [done[i] for i in range(cfg.I)]
    return aggregate(results, system.cfg.steps_per_period), results


# -- output files -----------------------------------------------------------


def _header_lines(header: dict | None) -> list[str]:
    return [f"# {k}={v}" for k, v in (header or {}).items()]


def write_trajectories_csv(results: Iterable[TrajectoryResult], path: str | Path,
                           header: dict | None = None) -> None:
    """Per-trajectory CSV with round-trip (17 significant digit) floats."""
    with open(path, "w", newline="") as fh:
        for line in _header_lines(header):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(["index", "theta0", "theta_dot0", "status", "attractor_2p",
                    "capture_iteration", "iterations", "cpu_sec", "error"])
        for r in sorted(results, key=lambda r: r.index):
            w.writerow([r.index, f"{r.theta0:.17g}", f"{r.theta_dot0:.17g}", r.status,
                        "" if r.attractor_2p is None else r.attractor_2p,
                        "" if r.capture_iteration is None else r.capture_iteration,
                        r.iterations, f"{r.cpu_sec:.17g}", r.error or ""])


def write_report_json(report: ProbabilityReport, path: str | Path, config: dict | None = None,
                      manifest: dict | None = None) -> None:
    obj = {"manifest": manifest or {}, "config": config or {}, "report": report.as_dict()}
    Path(path).write_text(json.dumps(obj, indent=1))
