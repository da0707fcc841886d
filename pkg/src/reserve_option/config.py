"""Scenario files: one TOML document with base tables and a ``scenarios`` array.

Every scenario inherits the top-level ``market``, ``extraction``, ``costs``,
``prior``, ``grid`` and ``validation`` tables and may override any key in
them. A scenario may give an explicit ``technical`` table (volumes,
generator, learn_a, learn_b) instead of calibrating from the prior.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .calibration import Calibration, PriorSpec, calibrate
from .model import CostModel, ExtractionPlan, GridSpec, MarketModel, TechnicalModel

SECTIONS = ("market", "extraction", "costs", "prior", "grid", "validation", "output", "technical")
LEARNING_MODES = ("calibrated", "no_learning")


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _take(table: dict, where: str, required=(), optional=None):
    optional = optional or {}
    unknown = set(table) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in table]
    if missing:
        raise ConfigError(f"{where}: missing field(s) {missing}")
    out = dict(optional)
    out.update(table)
    return out


@dataclass
class ValidationSettings:
    n_paths: int = 200_000
    seed: int = 12345
    n_points: int = 1024
    lattice_points: int = 1001
    lattice_substeps: int = 2
    regimes: list = field(default_factory=lambda: ["low", "mid", "high"])


@dataclass
class ScenarioConfig:
    name: str
    market: MarketModel
    plan: ExtractionPlan
    costs: CostModel
    grid: GridSpec
    learning: str = "calibrated"
    prior: PriorSpec | None = None
    technical: TechnicalModel | None = None
    validation: ValidationSettings = field(default_factory=ValidationSettings)
    surface_date_stride: int = 15
    surface_x_stride: int = 32
    learning_times: tuple = ()

    def calibrate(self) -> Calibration | None:
        """Calibration record, or ``None`` for an explicit technical model."""
        if self.technical is not None:
            return None
        return calibrate(self.prior, learning=self.learning == "calibrated")

    def technical_model(self) -> TechnicalModel:
        if self.technical is not None:
            return self.technical
        return self.calibrate().tech


def _build(name: str, raw: dict, where: str) -> ScenarioConfig:
    for key in raw:
        if key not in SECTIONS and key not in ("name", "learning"):
            raise ConfigError(f"{where}: unknown table or key {key!r}")
    try:
        mk = _take(raw.get("market", {}), f"{where}.market", ("kappa", "sigma", "rho"),
                   {"theta": None, "mean_spot": None})
        if (mk["theta"] is None) == (mk["mean_spot"] is None):
            raise ConfigError(f"{where}.market: give exactly one of theta or mean_spot")
        theta = mk["theta"] if mk["theta"] is not None else math.log(mk["mean_spot"])
        market = MarketModel(float(mk["kappa"]), float(theta), float(mk["sigma"]), float(mk["rho"]))

        ex = _take(raw.get("extraction", {}), f"{where}.extraction",
                   ("alpha", "beta", "gamma", "epsilon"), {"c": 0.0, "volume_unit": 1.0})
        plan = ExtractionPlan(**{k: float(v) for k, v in ex.items()})

        co = _take(raw.get("costs", {}), f"{where}.costs", ("c0", "c1"))
        costs = CostModel(float(co["c0"]), float(co["c1"]))

        gr = _take(raw.get("grid", {}), f"{where}.grid", ("horizon", "n_steps"),
                   {"x_half_width": None, "std_multiple": 6.0, "n_points": 4096,
                    "quadrature_points": 64})
        half = gr["x_half_width"]
        if half is None:
            half = gr["std_multiple"] * market.stationary_std
        grid = GridSpec.uniform(float(gr["horizon"]), int(gr["n_steps"]), float(half),
                                int(gr["n_points"]), int(gr["quadrature_points"]))

        learning = raw.get("learning", "calibrated")
        if learning not in LEARNING_MODES:
            raise ConfigError(f"{where}.learning: expected one of {LEARNING_MODES}, got {learning!r}")

        prior = technical = None
        if "technical" in raw:
            te = _take(raw["technical"], f"{where}.technical",
                       ("volumes", "generator", "learn_a", "learn_b"))
            technical = TechnicalModel(np.array(te["volumes"], dtype=float),
                                       np.array(te["generator"], dtype=float),
                                       float(te["learn_a"]), float(te["learn_b"]))
        else:
            pr = _take(raw.get("prior", {}), f"{where}.prior",
                       ("mu", "sigma0_sq", "sigmaTp_sq", "t_prime"), {"m": 31, "n_sigmas": 4.0})
            prior = PriorSpec(float(pr["mu"]), float(pr["sigma0_sq"]), float(pr["sigmaTp_sq"]),
                              float(pr["t_prime"]), int(pr["m"]), float(pr["n_sigmas"]))

        va = _take(raw.get("validation", {}), f"{where}.validation", (),
                   vars(ValidationSettings()))
        validation = ValidationSettings(**va)

        out = _take(raw.get("output", {}), f"{where}.output", (),
                    {"surface_date_stride": 15, "surface_x_stride": 32, "learning_times": [],
                     "dir": None})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc

    return ScenarioConfig(
        name=name, market=market, plan=plan, costs=costs, grid=grid, learning=learning,
        prior=prior, technical=technical, validation=validation,
        surface_date_stride=int(out["surface_date_stride"]),
        surface_x_stride=int(out["surface_x_stride"]),
        learning_times=tuple(float(t) for t in out["learning_times"]),
    )


@dataclass
class RunFile:
    path: Path
    scenarios: list
    output_dir: str | None = None

    def names(self):
        return [s.name for s in self.scenarios]

    def select(self, names=None):
        if not names:
            return list(self.scenarios)
        known = {s.name: s for s in self.scenarios}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigError(
                f"unknown scenario(s) {unknown}; available: {', '.join(self.names())}"
            )
        return [known[n] for n in names]


def loads(text: str, path="<string>") -> RunFile:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = {k: v for k, v in doc.items() if k != "scenarios"}
    for key in base:
        if key not in SECTIONS:
            raise ConfigError(f"{path}: unknown top-level key {key!r}")
    entries = doc.get("scenarios", [])
    if not entries:
        raise ConfigError(f"{path}: no [[scenarios]] defined")
    scenarios, seen = [], set()
    for i, entry in enumerate(entries):
        name = entry.get("name")
        if not name:
            raise ConfigError(f"{path}: scenarios[{i}] has no name")
        if name in seen:
            raise ConfigError(f"{path}: duplicate scenario name {name!r}")
        seen.add(name)
        merged = _merge(base, entry)
        merged.pop("name")
        scenarios.append(_build(name, merged, f"{path}: scenarios[{i}] ({name})"))
    return RunFile(Path(path), scenarios, base.get("output", {}).get("dir"))


def load(path) -> RunFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return loads(text, str(path))
