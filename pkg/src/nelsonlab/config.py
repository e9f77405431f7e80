"""Scenario configuration: YAML loading and validation.

A scenario file describes one diffusion, the reference density for it,
an optional path ensemble, and a list of checks to run.  The schema
shipped with the package rejects unknown keys outright, so a typo in a
config fails loudly instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import importlib.resources
import json
from typing import Any, Optional

import jsonschema
import yaml

from .model import BUILTIN_DRIFT_NAMES


class ConfigError(Exception):
    """Raised when a scenario file is malformed or inconsistent."""


_CHECK_NAMES = (
    "stationarity",
    "divergence_identity",
    "dynamic_gradient",
    "reversibility",
    "newton",
    "girsanov_variation",
)

# Checks that consume a path ensemble (always, or when mode=empirical).
_NEEDS_ENSEMBLE_ALWAYS = {"reversibility", "girsanov_variation"}
_NEEDS_ENSEMBLE_EMPIRICAL = {"stationarity", "dynamic_gradient"}

_DEFAULTS = {
    "description": "",
    "initial_law": {"kind": "stationary"},
    "expect": "pass",
    "figures": True,
}


def _load_schema() -> dict:
    ref = importlib.resources.files("nelsonlab").joinpath("schema/scenario.schema.json")
    return json.loads(ref.read_text())


_SCHEMA = None


def scenario_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        _SCHEMA = _load_schema()
    return _SCHEMA


@dataclasses.dataclass(frozen=True)
class CheckConfig:
    check: str
    name: str
    mode: str
    expect: str
    params: dict

    def needs_ensemble(self) -> bool:
        if self.check in _NEEDS_ENSEMBLE_ALWAYS:
            return True
        return self.check in _NEEDS_ENSEMBLE_EMPIRICAL and self.mode == "empirical"


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    name: str
    description: str
    seed: int
    drift: dict
    sigma: float
    horizon: float
    initial_law: dict
    grid: Optional[dict]
    density: Optional[dict]
    ensemble: Optional[dict]
    checks: tuple
    expect: str
    figures: bool
    raw: dict

    def needs_ensemble(self) -> bool:
        return any(c.needs_ensemble() for c in self.checks)

    def needs_density(self) -> bool:
        return any(c.check != "girsanov_variation" for c in self.checks)

    def resolved(self) -> dict:
        """The config after defaults, as a plain dict.  Seed overrides show up here."""
        out = dict(self.raw)
        out["seed"] = self.seed
        out.setdefault("description", self.description)
        out.setdefault("initial_law", dict(self.initial_law))
        out.setdefault("expect", self.expect)
        out.setdefault("figures", self.figures)
        return out

    def content_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, seed=int(seed))


def _semantic_checks(cfg: dict) -> None:
    drift = cfg["drift"]
    if drift["name"] not in BUILTIN_DRIFT_NAMES:
        raise ConfigError("unknown drift %r" % (drift["name"],))

    grid = cfg.get("grid")
    if grid is not None:
        lo, hi, nodes = grid["lower"], grid["upper"], grid["nodes"]
        if not (len(lo) == len(hi) == len(nodes)):
            raise ConfigError("grid lower/upper/nodes must have equal length")
        for a, b in zip(lo, hi):
            if not a < b:
                raise ConfigError("grid lower bound %g is not below upper bound %g" % (a, b))

    law = cfg.get("initial_law", _DEFAULTS["initial_law"])
    kind = law["kind"]
    if kind == "point" and "x0" not in law:
        raise ConfigError("point initial law needs x0")
    if kind == "gaussian" and ("mean" not in law or "cov" not in law):
        raise ConfigError("gaussian initial law needs mean and cov")

    density = cfg.get("density")
    if density is not None:
        src = density["source"]
        if src == "fokker_planck" and grid is None:
            raise ConfigError("fokker_planck density source needs a grid")
        if src == "kde" and grid is None:
            raise ConfigError("kde density source needs a grid")
        if src == "kde" and cfg.get("ensemble") is None:
            raise ConfigError("kde density source needs an ensemble")
        if src == "ou_closed_form":
            if cfg["drift"]["name"] != "ou":
                raise ConfigError("ou_closed_form density needs the ou drift")
            if kind != "gaussian" and kind != "point":
                raise ConfigError("ou_closed_form density needs a gaussian or point start")
            if grid is None:
                raise ConfigError("ou_closed_form density source needs a grid")

    names_seen = set()
    for entry in cfg["checks"]:
        check = entry["check"]
        mode = entry.get("mode", "analytic")
        label = entry.get("name", check)
        if label in names_seen:
            raise ConfigError("duplicate check name %r" % (label,))
        names_seen.add(label)
        if check in _NEEDS_ENSEMBLE_ALWAYS or (check in _NEEDS_ENSEMBLE_EMPIRICAL and mode == "empirical"):
            if cfg.get("ensemble") is None:
                raise ConfigError("check %r needs an ensemble section" % (label,))
        if check != "girsanov_variation" and cfg.get("density") is None and check != "reversibility":
            raise ConfigError("check %r needs a density section" % (label,))
        if check == "girsanov_variation" and cfg["sigma"] != 1.0:
            raise ConfigError("girsanov_variation is implemented for sigma=1 only")


def _build_checks(cfg: dict) -> tuple:
    default_expect = cfg.get("expect", "pass")
    out = []
    for entry in cfg["checks"]:
        check = entry["check"]
        out.append(
            CheckConfig(
                check=check,
                name=entry.get("name", check),
                mode=entry.get("mode", "analytic"),
                expect=entry.get("expect", default_expect),
                params=dict(entry.get("params", {})),
            )
        )
    return tuple(out)


def parse_scenario(data: Any, source: str = "<dict>") -> ScenarioConfig:
    """Validate a raw mapping and produce a ScenarioConfig."""
    if not isinstance(data, dict):
        raise ConfigError("%s: scenario must be a mapping, got %s" % (source, type(data).__name__))
    try:
        jsonschema.validate(data, scenario_schema())
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError("%s: at %s: %s" % (source, path, err.message)) from err
    _semantic_checks(data)

    return ScenarioConfig(
        name=data["name"],
        description=data.get("description", ""),
        seed=int(data["seed"]),
        drift=dict(data["drift"]),
        sigma=float(data["sigma"]),
        horizon=float(data["horizon"]),
        initial_law=dict(data.get("initial_law", _DEFAULTS["initial_law"])),
        grid=dict(data["grid"]) if data.get("grid") is not None else None,
        density=dict(data["density"]) if data.get("density") is not None else None,
        ensemble=dict(data["ensemble"]) if data.get("ensemble") is not None else None,
        checks=_build_checks(data),
        expect=data.get("expect", "pass"),
        figures=bool(data.get("figures", True)),
        raw=data,
    )


def load_scenario(path: str) -> ScenarioConfig:
    """Load and validate a scenario YAML file."""
    try:
        with open(path, "r") as fh:
            data = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError("cannot read %s: %s" % (path, err)) from err
    except yaml.YAMLError as err:
        raise ConfigError("cannot parse %s: %s" % (path, err)) from err
    return parse_scenario(data, source=path)


def bundled_scenario_names() -> list:
    root = importlib.resources.files("nelsonlab").joinpath("scenarios")
    names = []
    for item in root.iterdir():
        if item.name.endswith(".yaml"):
            names.append(item.name[: -len(".yaml")])
    return sorted(names)


def load_bundled_scenario(name: str) -> ScenarioConfig:
    ref = importlib.resources.files("nelsonlab").joinpath("scenarios/%s.yaml" % name)
    try:
        text = ref.read_text()
    except (FileNotFoundError, OSError) as err:
        known = ", ".join(bundled_scenario_names())
        raise ConfigError("no bundled scenario %r (have: %s)" % (name, known)) from err
    data = yaml.safe_load(text)
    return parse_scenario(data, source="bundled:%s" % name)
