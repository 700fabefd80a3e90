"""Command-line interface: table dumps, trajectories, validation, campaigns, timings.

Exit codes: 0 success, 1 validation failure, 2 domain or configuration
error, 3 integration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .capture import CaptureConfig, run_trajectory
from .hansen import build_g20_table
from .integrators import IntegrationError, build_system
from .model import KinkError, ModelParams, State, accel_tide_deriv, accel_tide_exact, dump_params, parse_params
from .strips import default_layout

__all__ = ["RunManifest", "main"]

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_INTEGRATION = 0, 1, 2, 3

# keys accepted in a config file besides the model parameters
_RUN_KEYS = {
    "I": int,
    "seed": int,
    "workers": int,
    "max_iterations": int,
    "L": int,
    "K": int,
    "eps_i": float,
    "eps_m": float,
    "method": str,
    "tide": str,
    "checkpoint_every": int,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    subcommand: str
    params_file: str | None
    overrides: list[str]
    params: dict
    run: dict
    outputs: list[str]
    seed: int | None
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}
        return d

    def header_lines(self) -> list[str]:
        return [f"# {k}: {json.dumps(v)}" for k, v in self.as_dict().items()]


def read_config(path: str | Path) -> tuple[list[str], dict]:
    """Split a flat key=value file into model parameter pairs and run options."""
    model, run = [], {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in _RUN_KEYS:
            try:
                run[key] = _RUN_KEYS[key](val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        else:
            model.append(f"{key}={val}")
    return model, run


# -- argument parsing -------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--params", metavar="FILE", help="key=value file (model parameters and run options)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one model parameter")
    p.add_argument("--e", type=float, help="orbital eccentricity override")
    p.add_argument("--out", metavar="PATH", help="output file (or directory for campaign)")
    p.add_argument("--cache-dir", metavar="DIR", default=os.environ.get("SPINORBIT_CACHE_DIR"),
                   help="cache for fitted tables (default: $SPINORBIT_CACHE_DIR, else none)")


def _capture_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iters", type=int, help="iteration cap per trajectory")
    p.add_argument("--capture-L", type=int, help="block length L")
    p.add_argument("--capture-K", type=int, help="consecutive passing blocks K")
    p.add_argument("--capture-eps-i", type=float, help="resonance tolerance eps_i")
    p.add_argument("--capture-eps-m", type=float, help="slope tolerance eps_m")
    p.add_argument("--method", choices=("hybrid", "rk"), help="HEM in H strips or RK everywhere")
    p.add_argument("--tide", choices=("fast", "exact"), help="tidal evaluation inside RK")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spinorbit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hansen", help="dump G_20q(e)")
    _common(p)
    p.add_argument("--q-min", type=int, default=-12)
    p.add_argument("--q-max", type=int, default=12)

    p = sub.add_parser("tide-dump", help="tabulate the tidal acceleration and its derivative")
    _common(p)
    p.add_argument("--lo", type=float, default=-1.0, help="lower θ̇/n")
    p.add_argument("--hi", type=float, default=5.0, help="upper θ̇/n")
    p.add_argument("--samples", type=int, default=1201)

    p = sub.add_parser("layout", help="dump the strip layout as JSON")
    _common(p)

    p = sub.add_parser("validate", help="run the Hansen, fast-tide and HEM gates")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-strip", type=int, default=250, help="random states per H strip")
    p.add_argument("--samples", type=int, default=100_000, help="fast-tide samples")
    p.add_argument("--series-degree", type=int, help="override the HEM series degree of every H strip")

    p = sub.add_parser("traj", help="iterate one trajectory with capture detection")
    _common(p)
    _capture_flags(p)
    p.add_argument("--theta0", type=float, required=True, help="θ0 [rad]")
    p.add_argument("--theta-dot0", type=float, required=True, help="θ̇0 [rad/yr]")
    p.add_argument("--stride", type=int, default=1000, help="record every stride-th iterate (0: none)")

    p = sub.add_parser("campaign", help="Monte Carlo capture probabilities")
    _common(p)
    _capture_flags(p)
    p.add_argument("--I", type=int, dest="I", help="number of initial conditions")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("bench", help="timings in calibrated CPU-sec")
    _common(p)
    p.add_argument("--iters", type=int, default=100_000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--check", action="store_true", help="exit 1 when a performance floor is missed")
    return ap


# -- helpers ----------------------------------------------------------------


def _resolve(args) -> tuple[ModelParams, dict, list[str]]:
    model_pairs, run = ([], {})
    if args.params:
        model_pairs, run = read_config(args.params)
    overrides = list(args.set)
    if args.e is not None:
        overrides.append(f"e={args.e!r}")
    params = parse_params(model_pairs + overrides)
    return params, run, overrides


def _capture_cfg(args, run: dict) -> CaptureConfig:
    def pick(flag, key):
        val = getattr(args, flag, None)
        return run.get(key) if val is None else val

    kw = {}
    for flag, key in (("capture_L", "L"), ("capture_K", "K"), ("capture_eps_i", "eps_i"),
                      ("capture_eps_m", "eps_m"), ("max_iters", "max_iterations")):
        v = pick(flag, key)
        if v is not None:
            kw[key] = v
    return CaptureConfig(**kw)


def _manifest(args, params, run, overrides, outputs, seed=None) -> RunManifest:
    return RunManifest(args.command, args.params, overrides, params.raw(), run, outputs, seed)


def _open_out(path: str | None):
    return open(path, "w", newline="") if path else sys.stdout


def _write_csv(path, manifest: RunManifest, header: list[str], rows) -> None:
    fh = _open_out(path)
    try:
        for line in manifest.header_lines():
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _g(x) -> str:
    return "" if x is None else f"{x:.17g}"


# -- commands ---------------------------------------------------------------


def cmd_hansen(args) -> int:
    params, run, overrides = _resolve(args)
    table = build_g20_table(params.e, (args.q_min, args.q_max))
    rows = []
    for q in range(args.q_min, args.q_max + 1):
        g = table[q]
        rows.append([q, _g(g), _g(math.log10(abs(g))) if g != 0 else ""])
    _write_csv(args.out, _manifest(args, params, run, overrides, [args.out or "-"]), ["q", "G20q", "log10_abs_G20q"], rows)
    return EXIT_OK


def cmd_tide_dump(args) -> int:
    params, run, overrides = _resolve(args)
    if args.samples < 2 or not args.hi > args.lo:
        raise ConfigError("need --samples >= 2 and --hi > --lo")
    table = params.hansen_table()
    u = np.linspace(args.lo, args.hi, args.samples)
    v = u * params.n
    acc = accel_tide_exact(v, params, table)
    rows = []
    for ui, vi, ai in zip(u, v, acc):
        try:
            d = float(accel_tide_deriv(vi, params, table))
        except KinkError:
            d = None
        rows.append([_g(ui), _g(vi), _g(ai), _g(d)])
    _write_csv(args.out, _manifest(args, params, run, overrides, [args.out or "-"]),
               ["theta_dot_over_n", "theta_dot", "accel_tide", "daccel_dtheta_dot"], rows)
    return EXIT_OK


def cmd_layout(args) -> int:
    params, run, overrides = _resolve(args)
    layout = default_layout(params.n)
    obj = {"manifest": _manifest(args, params, run, overrides, [args.out or "-"]).as_dict(), "layout": layout.to_dict()}
    text = json.dumps(obj, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    from .gates import fast_tide_gate, hansen_gate, hem_gate

    params, run, overrides = _resolve(args)
    layout = default_layout(params.n)
    if args.series_degree is not None:
        strips = tuple(dataclasses.replace(s, series_degree=args.series_degree) if s.kind == "H" else s
                       for s in layout.strips)
        layout = dataclasses.replace(layout, strips=strips)
    system = build_system(params, layout=layout, cache_dir=args.cache_dir)
    gates = [
        hansen_gate(params.e),
        fast_tide_gate(system, samples=args.samples, seed=args.seed),
        hem_gate(system, per_strip=args.per_strip, seed=args.seed),
    ]
    manifest = _manifest(args, params, run, overrides, [args.out] if args.out else [], args.seed)
    for g in gates:
        print(g.line())
    if args.out:
        Path(args.out).write_text(json.dumps({
            "manifest": manifest.as_dict(),
            "gates": [{"name": g.name, "passed": g.passed, "measured": g.measured,
                       "tolerance": g.tolerance, "detail": g.detail} for g in gates],
        }, indent=1))
    return EXIT_OK if all(g.passed for g in gates) else EXIT_VALIDATION


def cmd_traj(args) -> int:
    params, run, overrides = _resolve(args)
    cfg = _capture_cfg(args, run)
    system = build_system(params, cache_dir=args.cache_dir)
    manifest = _manifest(args, params, run, overrides, [args.out or "-"])
    fh = _open_out(args.out)
    try:
        for line in manifest.header_lines():
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(["k", "theta", "theta_dot"])

        def emit(rec):
            w.writerows([[int(k), _g(th), _g(v)] for k, th, v in rec])

        report, _ = run_trajectory(system, State(args.theta0, args.theta_dot0, 0.0), cfg,
                                   stride=args.stride, on_records=emit,
                                   method=args.method or run.get("method", "hybrid"),
                                   tide=args.tide or run.get("tide", "fast"))
    finally:
        if fh is not sys.stdout:
            fh.close()
    summary = report.as_dict()
    print(json.dumps(summary), file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_INTEGRATION if report.error else EXIT_OK


def cmd_campaign(args) -> int:
    from .montecarlo import CampaignConfig, run_campaign, write_report_json, write_trajectories_csv

    params, run, overrides = _resolve(args)

    def pick(name, default):
        v = getattr(args, name, None)
        return run.get(name, default) if v is None else v

    cfg = CampaignConfig(
        I=pick("I", 100),
        seed=pick("seed", 0),
        workers=pick("workers", 1),
        capture=_capture_cfg(args, run),
        method=pick("method", "hybrid"),
        tide=pick("tide", "fast"),
        checkpoint_every=pick("checkpoint_every", 50),
    )
    out = Path(args.out or "campaign")
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "trajectories.csv", out / "checkpoint.json"]
    manifest = _manifest(args, params, run, overrides, [str(p) for p in paths], cfg.seed)
    system = build_system(params, cache_dir=args.cache_dir)

    def progress(done, total):
        print(f"\r{done}/{total}", end="", file=sys.stderr, flush=True)

    report, results = run_campaign(cfg, system, checkpoint=paths[2], progress=progress)
    print(file=sys.stderr)
    config = {**cfg.identity(params.n), "workers": cfg.workers}
    write_report_json(report, paths[0], config=config, manifest=manifest.as_dict())
    write_trajectories_csv(results, paths[1], header={k: json.dumps(v) for k, v in manifest.as_dict().items()})
    for label, count, p, dp in report.table():
        print(f"{label:>5} {count:8d} {p:9.4f}% +- {dp:.4f}%")
    print(f"uncaptured {report.uncaptured}  failed {report.failed}")
    return EXIT_INTEGRATION if report.failed else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench

    params, run, overrides = _resolve(args)
    system = build_system(params, cache_dir=args.cache_dir)
    rep = run_bench(system, n_iter=args.iters, repeats=args.repeats)
    r = rep.ratios
    checks = [
        ("rk_fast_over_hem >= 10", r["rk_fast_over_hem"] >= 10),
        ("rk_exact_over_rk_fast >= 2", r["rk_exact_over_rk_fast"] >= 2),
        ("eval_exact_over_fast >= 3", r["eval_exact_over_fast"] >= 3),
        ("calibration drift <= 20%", rep.calibration_drift <= 0.2),
    ]
    manifest = _manifest(args, params, run, overrides, [args.out or "-"])
    rows = [[k, _g(v)] for k, v in rep.rows()] + [[name, "PASS" if ok else "FAIL"] for name, ok in checks]
    _write_csv(args.out, manifest, ["quantity", "value"], rows)
    if args.out:
        for k, v in rows:
            print(f"{k:32s} {v}")
    if args.check and not all(ok for _, ok in checks):
        return EXIT_VALIDATION
    return EXIT_OK


COMMANDS = {
    "hansen": cmd_hansen,
    "tide-dump": cmd_tide_dump,
    "layout": cmd_layout,
    "validate": cmd_validate,
    "traj": cmd_traj,
    "campaign": cmd_campaign,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except IntegrationError as exc:
        print(f"integration failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
