"""Scenario execution: config -> diffusion -> density -> checks -> reports.

The runner owns seed bookkeeping.  Every check gets its own seed derived
from the scenario seed and the check label through sha256, so reordering
or removing one check never shifts the randomness of another.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
from typing import Optional

import numpy as np
import scipy.linalg

from . import characterize, density as density_mod, simulate
from .benchmarks import ou_gaussian_series
from .characterize import CheckReport
from .config import CheckConfig, ConfigError, ScenarioConfig
from .density import DensityField, DensityTimeSeries, GridLaw, GridSpec
from .model import BlowUpError, DiffusionSpec, GaussianLaw, PointMass, VectorField, builtin_drift

__all__ = ["RunResult", "RunnerError", "build_spec", "build_grid", "derive_seed", "run_scenario"]


class RunnerError(Exception):
    """A scenario that validated but cannot be executed as written."""


def derive_seed(base: int, label: str) -> int:
    """Stable per-check seed: sha256 of base and label, folded to 63 bits."""
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _drift_matrix(drift_cfg: dict, dim: int) -> Optional[np.ndarray]:
    """The matrix A for linear builtin drifts, None for nonlinear ones."""
    name = drift_cfg["name"]
    params = tuple(drift_cfg.get("params", ()))
    if name == "ou":
        theta = params[0] if params else 1.0
        return -theta * np.eye(dim)
    if name == "rotational_linear":
        return np.array([[-1.0, -1.0], [1.0, -1.0]])
    if name == "shear":
        s = params[0] if params else 1.0
        return np.array([[-1.0, s], [0.0, -1.0]])
    if name == "custom_linear":
        d = int(round(len(params) ** 0.5))
        return np.asarray(params, dtype=float).reshape(d, d)
    return None


def build_grid(cfg: ScenarioConfig) -> Optional[GridSpec]:
    if cfg.grid is None:
        return None
    g = cfg.grid
    return GridSpec(np.asarray(g["lower"], float), np.asarray(g["upper"], float),
                    tuple(g["nodes"]))


def _initial_law(cfg: ScenarioConfig, drift: VectorField, grid: Optional[GridSpec]):
    law = cfg.initial_law
    kind = law["kind"]
    if kind == "point":
        return PointMass(np.asarray(law["x0"], float))
    if kind == "gaussian":
        return GaussianLaw(np.asarray(law["mean"], float), np.asarray(law["cov"], float))
    # stationary: exact Gaussian for linear drifts, grid sampling otherwise
    A = _drift_matrix(cfg.drift, drift.dim)
    if A is not None:
        if np.max(np.linalg.eigvals(A).real) >= 0:
            raise RunnerError("drift matrix is not Hurwitz; no stationary law to start from")
        cov = scipy.linalg.solve_continuous_lyapunov(A, -cfg.sigma**2 * np.eye(drift.dim))
        return GaussianLaw(np.zeros(drift.dim), cov)
    if grid is None:
        raise RunnerError("stationary start for a nonlinear drift needs a grid")
    dens = density_mod.stationary_density(drift, cfg.sigma, grid)
    return GridLaw(dens)


def build_spec(cfg: ScenarioConfig, grid: Optional[GridSpec] = None) -> DiffusionSpec:
    drift = builtin_drift(cfg.drift["name"], cfg.drift.get("params", ()), cfg.drift.get("dim"))
    law = _initial_law(cfg, drift, grid)
    return DiffusionSpec(drift=drift, sigma=cfg.sigma, initial_law=law, horizon=cfg.horizon)


def _initial_density(cfg: ScenarioConfig, spec: DiffusionSpec, grid: GridSpec) -> DensityField:
    kind = cfg.initial_law["kind"]
    if kind == "gaussian":
        return density_mod.gaussian_density(
            grid, cfg.initial_law["mean"], cfg.initial_law["cov"])
    if kind == "point":
        # mollify: a Gaussian three cells wide keeps the solver's first steps sane
        x0 = np.asarray(cfg.initial_law["x0"], float)
        width = 3.0 * np.max(grid.spacing)
        return density_mod.gaussian_density(grid, x0, width**2 * np.eye(grid.dim))
    A = _drift_matrix(cfg.drift, spec.dim)
    if A is not None:
        return density_mod.stationary_gaussian_linear(A, spec.sigma, grid)
    return density_mod.stationary_density(spec.drift, spec.sigma, grid)


def _build_density(
    cfg: ScenarioConfig,
    spec: DiffusionSpec,
    grid: Optional[GridSpec],
    ensemble: Optional[simulate.PathEnsemble],
):
    """Return (density_field, series_or_None) per the configured source."""
    d = cfg.density
    if d is None:
        return None, None
    src = d["source"]
    if src == "stationary_analytic":
        if grid is None:
            raise RunnerError("stationary_analytic density needs a grid")
        A = _drift_matrix(cfg.drift, spec.dim)
        if spec.drift.potential_fn is not None:
            return density_mod.stationary_density(spec.drift, spec.sigma, grid), None
        if A is not None:
            return density_mod.stationary_gaussian_linear(A, spec.sigma, grid), None
        raise RunnerError("no closed-form stationary density for this drift")
    if src == "ou_closed_form":
        theta = cfg.drift.get("params", [1.0])[0] if cfg.drift.get("params") else 1.0
        if cfg.initial_law["kind"] == "gaussian":
            mean0 = np.asarray(cfg.initial_law["mean"], float)
            var0 = float(np.asarray(cfg.initial_law["cov"], float).ravel()[0])
        else:
            mean0 = np.asarray(cfg.initial_law["x0"], float)
            var0 = 0.0
        series = ou_gaussian_series(theta, spec.sigma, float(mean0.ravel()[0]), var0,
                                    grid, cfg.horizon)
        t = d.get("t", cfg.horizon)
        return series.at_time(t), series
    if src == "fokker_planck":
        init = _initial_density(cfg, spec, grid)
        steps = d.get("n_time_steps", "auto")
        if steps == "auto":
            n_steps = density_mod.fokker_planck_stable_steps(spec, grid)
        else:
            n_steps = int(steps)
        series = density_mod.fokker_planck_solve(
            spec, init, grid=grid, n_time_steps=n_steps,
            n_slices=int(d.get("n_slices", 65)))
        t = d.get("t", cfg.horizon)
        return series.at_time(t), series
    if src == "kde":
        if ensemble is None:
            raise RunnerError("kde density needs the scenario ensemble")
        t = d.get("t", cfg.horizon)
        samples = ensemble.marginal(t)
        return density_mod.kde(samples, grid, t=t, bandwidth=d.get("bandwidth")), None
    raise RunnerError(f"unknown density source '{src}'")


def _build_gamma(params: dict, dim: int) -> VectorField:
    g = params.get("gamma", {"kind": "constant", "value": [1.0] * dim})
    if g["kind"] == "constant":
        v = np.asarray(g.get("value", [1.0] * dim), float)
        if v.shape != (dim,):
            raise RunnerError(f"constant gamma needs {dim} components, got {v.shape}")
        vec = v.copy()
        return VectorField(
            dim=dim,
            eval_fn=lambda x: np.broadcast_to(vec, x.shape).copy(),
            jacobian_fn=lambda x: np.zeros(x.shape + (dim,)),
            name="constant",
            params=tuple(vec),
        )
    return builtin_drift(g["name"], g.get("params", ()), dim)


def _run_check(
    cc: CheckConfig,
    spec: DiffusionSpec,
    dens: Optional[DensityField],
    series: Optional[DensityTimeSeries],
    ensemble: Optional[simulate.PathEnsemble],
    seed: int,
    stationary_start: bool,
) -> CheckReport:
    p = cc.params
    if cc.check == "stationarity":
        kwargs = dict(mode=cc.mode, name=cc.name)
        for key in ("t", "h_lag", "bandwidth", "pool", "tol", "empirical_tol"):
            if key in p:
                kwargs[key] = p[key]
        if cc.mode == "empirical":
            kwargs["ensemble"] = ensemble
        return characterize.stationarity_check(spec, dens, **kwargs)
    if cc.check == "divergence_identity":
        kwargs = dict(name=cc.name)
        if "tol" in p:
            kwargs["tol"] = p["tol"]
        return characterize.identity_residual(spec, dens, series=series, **kwargs)
    if cc.check == "dynamic_gradient":
        kwargs = dict(mode=cc.mode, name=cc.name, series=series)
        for key in ("t", "h_lag", "bandwidth", "pool", "tol", "empirical_tol"):
            if key in p:
                kwargs[key] = p[key]
        if cc.mode == "empirical":
            kwargs["ensemble"] = ensemble
        return characterize.dynamic_gradient_test(spec, dens, **kwargs)
    if cc.check == "reversibility":
        n_paths = ensemble.n_paths if ensemble is not None else 0
        n_steps = ensemble.n_steps if ensemble is not None else 0
        return characterize.reversibility_check(
            spec, n_paths, n_steps, seed,
            lag=p.get("lag", 0.5),
            assume_stationary_start=stationary_start,
            name=cc.name, ensemble=ensemble)
    if cc.check == "newton":
        kwargs = dict(name=cc.name, series=series)
        if "tol" in p:
            kwargs["tol_imag"] = p["tol"]
        return characterize.newton_residual(spec, dens, **kwargs)
    if cc.check == "girsanov_variation":
        gamma = _build_gamma(p, spec.dim)
        kwargs = dict(name=cc.name, seed=seed, ensemble=ensemble,
                      gamma=gamma)
        if "eps" in p:
            kwargs["eps_list"] = tuple(p["eps"])
        for key in ("phi", "coordinate"):
            if key in p:
                kwargs[key] = p[key]
        rep = characterize.girsanov_variation_check(spec, **kwargs)
        if "expected_value" in p:
            rep.extras["expected_value"] = float(p["expected_value"])
            rep.extras["expected_value_gap"] = abs(
                rep.extras["rhs_mean"] - float(p["expected_value"]))
        return rep
    raise RunnerError(f"unknown check '{cc.check}'")


@dataclasses.dataclass
class RunResult:
    scenario: ScenarioConfig
    reports: list
    check_seeds: dict
    runtime_s: float
    ensemble: Optional[simulate.PathEnsemble] = None
    density: Optional[DensityField] = None
    series: Optional[DensityTimeSeries] = None
    error: Optional[str] = None

    @property
    def expectations(self) -> list:
        out = []
        for cc, rep in zip(self.scenario.checks, self.reports):
            entry = {
                "name": cc.name,
                "check": cc.check,
                "expect": cc.expect,
                "verdict": rep.verdict,
                "as_expected": rep.verdict == cc.expect,
            }
            out.append(entry)
        return out

    @property
    def inconclusive(self) -> bool:
        return any(r.verdict == "inconclusive" for r in self.reports)

    @property
    def as_expected(self) -> bool:
        exp = self.expectations
        return len(exp) == len(self.scenario.checks) and all(e["as_expected"] for e in exp)

    @property
    def exit_code(self) -> int:
        """0 expectations met, 2 some verdict diverged, 3 inconclusive, 70 aborted."""
        if self.error is not None:
            return 70
        if self.inconclusive:
            return 3
        return 0 if self.as_expected else 2


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    """Execute every check of a scenario; never raises on check failure.

    BlowUpError and CFLError abort the run (error recorded, exit code 70).
    Config-level impossibilities raise RunnerError/ConfigError to the caller.
    """
    t0 = time.time()
    grid = build_grid(cfg)
    spec = build_spec(cfg, grid)
    seeds = {cc.name: derive_seed(cfg.seed, cc.name) for cc in cfg.checks}

    reports: list = []
    ensemble = None
    dens = series = None
    error = None
    try:
        if cfg.needs_ensemble() or (cfg.density or {}).get("source") == "kde":
            ens_cfg = cfg.ensemble
            if ens_cfg is None:
                raise ConfigError("scenario needs an ensemble section")
            ensemble = simulate.euler_maruyama(
                spec, int(ens_cfg["n_paths"]), int(ens_cfg["n_steps"]),
                derive_seed(cfg.seed, "ensemble"))
        dens, series = _build_density(cfg, spec, grid, ensemble)
        stationary_start = cfg.initial_law["kind"] == "stationary"
        for cc in cfg.checks:
            reports.append(_run_check(cc, spec, dens, series, ensemble,
                                      seeds[cc.name], stationary_start))
    except (BlowUpError, density_mod.CFLError) as err:
        error = f"{type(err).__name__}: {err}"

    return RunResult(
        scenario=cfg, reports=reports, check_seeds=seeds,
        runtime_s=time.time() - t0, ensemble=ensemble,
        density=dens, series=series, error=error)
