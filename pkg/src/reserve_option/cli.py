"""Command line entry point: ``run``, ``validate`` and ``calibrate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fst
from .calibration import CalibrationError, conditional_moments
from .config import ConfigError, ScenarioConfig, load
from .model import GridSpec, InfeasibleVolumeError, limit_transition, reserve_value
from .oracle import SimConfig, european_mc, lattice_bermudan, simulate_dcf

OUT_ENV = "RESERVE_OPTION_OUT"
DEFAULT_OUT = "reserve_option_out"

BOUNDARY_COLUMNS = ("scenario", "t_years", "regime_index", "volume_estimate", "boundary_spot_or_empty")
SURFACE_COLUMNS = ("scenario", "t_years", "regime_index", "x", "spot", "value_undeflated")
LEARNING_COLUMNS = ("t_years", "state", "probability")

log = logging.getLogger("reserve_option")


def fmt(value) -> str:
    """Shortest round-tripping text for a number; empty for NaN/None."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([r if isinstance(r, str) else fmt(r) for r in row])


def _write_json(path: Path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def boundary_rows(name, boundary: fst.ExerciseBoundary, volumes):
    for i, t in enumerate(boundary.times):
        for j, v in enumerate(volumes):
            yield (name, float(t), j, float(v), boundary.spots[i, j])


def surface_rows(name, surface: fst.ValueSurface, date_stride, x_stride):
    n = surface.times.size
    dates = sorted(set(range(0, n, date_stride)) | {n - 1})
    xs = np.arange(0, surface.x_grid.size, x_stride)
    spots = surface.spots
    for i in dates:
        t = surface.times[i]
        vals = np.maximum(surface.continuation[i], np.maximum(surface.payoff[i], 0.0)) * math.exp(surface.rho * t)
        for j in range(vals.shape[0]):
            for k in xs:
                yield (name, float(t), j, float(surface.x_grid[k]), float(spots[k]), float(vals[j, k]))


def learning_rows(times, tech):
    for t in times:
        row = limit_transition(t, tech)[tech.mid]
        for k, p in enumerate(row):
            yield (float(t), k, float(p))


def _learning_times(sc: ScenarioConfig):
    times = {0.0}
    if sc.prior is not None:
        times.add(sc.prior.t_prime)
    else:
        times.add(sc.grid.horizon)
    times.update(sc.learning_times)
    return sorted(times)


def run_scenario(sc: ScenarioConfig, out_dir: Path):
    """Calibrate, solve and write every artifact for one scenario."""
    start = time.perf_counter()
    cal = sc.calibrate()
    tech = cal.tech if cal is not None else sc.technical
    surface = fst.solve(sc.market, sc.plan, sc.costs, tech, sc.grid)
    boundary = fst.extract_boundary(surface)

    target = out_dir / sc.name
    target.mkdir(parents=True, exist_ok=True)
    _write_csv(target / "boundary.csv", BOUNDARY_COLUMNS, boundary_rows(sc.name, boundary, tech.volumes))
    _write_csv(
        target / "surface.csv",
        SURFACE_COLUMNS,
        surface_rows(sc.name, surface, sc.surface_date_stride, sc.surface_x_stride),
    )
    _write_csv(target / "learning.csv", LEARNING_COLUMNS, learning_rows(_learning_times(sc), tech))

    report = cal.report() if cal is not None else {
        "volumes": tech.volumes.tolist(),
        "learn_a": tech.learn_a,
        "learn_b": tech.learn_b,
    }
    report.pop("seconds", None)  # keep artifacts byte-identical across runs
    report["scenario"] = sc.name
    report["learning"] = sc.learning
    report["value_t0_x0"] = surface.value_at(0.0, 0).tolist()
    _write_json(target / "calibration.json", report)
    log.info("%s: done in %.2fs -> %s", sc.name, time.perf_counter() - start, target)
    return surface, boundary


def _pick_regimes(spec, m):
    names = {"low": 0, "mid": m // 2, "high": m - 1}
    out = []
    for r in spec:
        k = names[r] if isinstance(r, str) else int(r)
        if not 0 <= k < m:
            raise ConfigError(f"validation regime {r!r} outside 0..{m - 1}")
        if k not in out:
            out.append(k)
    return out


def _check(name, estimate, reference, tol=None, se=None, n_se=3.0):
    """One validation record; either a relative tolerance or an SE band."""
    diff = abs(estimate - reference)
    if se is not None:
        ok = diff <= n_se * se
        return {"check": name, "estimate": estimate, "reference": reference,
                "standard_error": se, "z": diff / se if se > 0 else (0.0 if diff == 0 else math.inf),
                "pass": bool(ok)}
    rel = diff / max(abs(reference), 1e-300)
    return {"check": name, "estimate": estimate, "reference": reference,
            "relative_error": rel, "tolerance": tol, "pass": bool(rel <= tol)}


def validate_scenario(sc: ScenarioConfig, factor=fst.step_factor):
    """Three-way oracle checks at reduced resolution.

    European FST against Monte Carlo and the lattice, Bermudan FST against
    the lattice, and the reserve value against its Monte-Carlo estimate.
    ``factor`` replaces the transform multiplier (negative control).
    """
    va = sc.validation
    tech = sc.technical_model()
    g = sc.grid
    grid = GridSpec(g.x_half_width, va.n_points, g.exercise_dates, g.quadrature_points)
    regimes = _pick_regimes(va.regimes, tech.m)
    sim = SimConfig(n_paths=va.n_paths, seed=va.seed)
    args = (sc.market, sc.plan, sc.costs, tech, grid)
    checks = []

    euro_mask = np.zeros(grid.exercise_dates.size, dtype=bool)
    euro_mask[-1] = True
    euro = fst.solve(*args, exercisable=euro_mask, factor=factor).value_at(0.0, 0)
    euro_lat = lattice_bermudan(*args, n_x=va.lattice_points, substeps=va.lattice_substeps,
                                exercisable=euro_mask)
    for j in regimes:
        mc, se = european_mc(j, 0.0, sc.market, sc.plan, sc.costs, tech, grid.horizon, sim)
        checks.append({"regime": j, **_check("european_fst_vs_mc", float(euro[j]), mc, se=se)})
        checks.append({"regime": j, **_check("european_fst_vs_lattice", float(euro[j]),
                                             float(euro_lat[j]), tol=0.01)})

    berm = fst.solve(*args, factor=factor).value_at(0.0, 0)
    berm_lat = lattice_bermudan(*args, n_x=va.lattice_points, substeps=va.lattice_substeps)
    tol = 1e-3 if tech.m == 1 else 1e-2
    for j in regimes:
        checks.append({"regime": j, **_check("bermudan_fst_vs_lattice", float(berm[j]),
                                             float(berm_lat[j]), tol=tol)})

    j = tech.mid
    est, se = simulate_dcf(0.0, 0.0, j, sc.market, sc.plan, tech, sim)
    ref = reserve_value(0.0, 0.0, j, sc.market, sc.plan, tech, grid)
    if se == 0:
        checks.append({"regime": j, **_check("reserve_value_vs_mc", est, ref, tol=1e-8)})
    else:
        checks.append({"regime": j, **_check("reserve_value_vs_mc", est, ref, se=se)})

    return {"scenario": sc.name, "n_points": va.n_points, "n_paths": va.n_paths,
            "seed": va.seed, "checks": checks, "pass": all(c["pass"] for c in checks)}


def calibration_report(sc: ScenarioConfig):
    cal = sc.calibrate()
    if cal is None:
        tech = sc.technical
        doc = {"volumes": tech.volumes.tolist(), "learn_a": tech.learn_a, "learn_b": tech.learn_b,
               "explicit": True}
    else:
        doc = cal.report()
        tech = cal.tech
    doc["scenario"] = sc.name
    doc["mean_t0"], doc["variance_t0"] = conditional_moments(0.0, tech)
    return doc


def _out_dir(args, runfile):
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if runfile.output_dir:
        return Path(runfile.output_dir)
    return Path(DEFAULT_OUT)


def _tampered_factor(omega, dt, market):
    # wrong sign on the kappa * dt term
    return fst.step_factor(omega, dt, market) * np.exp(-2 * market.kappa * dt)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="reserve-option",
                                description="Value an option to develop a reserve of uncertain size.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="solve scenarios and write CSV artifacts")
    pr.add_argument("--config", required=True)
    pr.add_argument("--scenario", action="append", default=[], metavar="NAME")
    pr.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or {DEFAULT_OUT})")

    pv = sub.add_parser("validate", help="cross-check the pricer against the oracles")
    pv.add_argument("--config", required=True)
    pv.add_argument("--scenario", action="append", default=[], metavar="NAME")
    pv.add_argument("--report", help="write the JSON report here as well as to stdout")
    pv.add_argument("--tamper-step-factor", action="store_true", help=argparse.SUPPRESS)

    pc = sub.add_parser("calibrate", help="print the calibration report")
    pc.add_argument("--config", required=True)
    pc.add_argument("--scenario", action="append", default=[], metavar="NAME")

    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    try:
        runfile = load(args.config)
        scenarios = runfile.select(args.scenario)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    current = None
    try:
        if args.command == "run":
            out = _out_dir(args, runfile)
            for sc in scenarios:
                current = sc.name
                run_scenario(sc, out)
            return 0
        if args.command == "calibrate":
            docs = []
            for sc in scenarios:
                current = sc.name
                docs.append(calibration_report(sc))
            json.dump(docs, sys.stdout, indent=2)
            sys.stdout.write("\n")
            return 0
        factor = _tampered_factor if args.tamper_step_factor else fst.step_factor
        reports = []
        for sc in scenarios:
            current = sc.name
            reports.append(validate_scenario(sc, factor))
        doc = {"pass": all(r["pass"] for r in reports), "scenarios": reports}
        text = json.dumps(doc, indent=2)
        print(text)
        if args.report:
            Path(args.report).write_text(text + "\n", encoding="utf-8")
        return 0 if doc["pass"] else 1
    except (CalibrationError, InfeasibleVolumeError, ValueError) as exc:
        print(f"error in scenario {current!r}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
