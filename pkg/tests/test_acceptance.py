"""End-to-end acceptance battery.

Each test exercises one headline claim of the package at its stated
tolerance and prints a single PASS/FAIL line with the measured value, so a
plain ``pytest tests/test_acceptance.py -s`` reads as a checklist. The
expensive stationary ensemble is built once and shared.
"""

import math

import numpy as np
import pytest

from nelsonlab.benchmarks import (
    battery,
    gradient_stationary_battery,
    one_dim_battery,
    ou_marginal,
    rotational_stationary,
)
from nelsonlab.characterize import (
    dynamic_gradient_test,
    girsanov_variation_check,
    identity_residual,
    newton_residual,
    reversibility_check,
    stationarity_check,
    weighted_rms,
)
from nelsonlab.config import load_bundled_scenario
from nelsonlab.density import (
    GridSpec,
    fokker_planck_solve,
    fokker_planck_stable_steps,
    gaussian_density,
    stationary_density,
)
from nelsonlab.export import export_run
from nelsonlab.model import DiffusionSpec, GaussianLaw, VectorField, builtin_drift
from nelsonlab.nelson import empirical_derivative
from nelsonlab.runner import run_scenario
from nelsonlab.simulate import euler_maruyama

EXACT_EXPECTATION_STEP = 1.0 - math.exp(-1.0)   # d/deps E[X_T] for unit-rate ou


def _line(label: str, value: float, tol: float, ok: bool) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"{status} {label}: measured {value:.4g} against {tol:g}")


def ou_spec(horizon: float = 4.0) -> DiffusionSpec:
    drift = builtin_drift("ou", (1.0,), dim=1)
    law = GaussianLaw(np.zeros(1), 0.5 * np.eye(1))
    return DiffusionSpec(drift=drift, sigma=1.0, initial_law=law, horizon=horizon)


def l1_distance(dens, other_values: np.ndarray) -> float:
    w = dens.grid.trapezoid_weights()
    return float(np.sum(w * np.abs(dens.values - other_values)))


@pytest.fixture(scope="module")
def big_ou_ensemble():
    # 1e5 paths over [0, 4] from the exact stationary law
    return euler_maruyama(ou_spec(), 100_000, 400, seed=11)


def test_01_rotational_second_order_identity():
    bench = rotational_stationary(nodes=256)
    rep = identity_residual(bench.spec, bench.density(), tol=1e-6)
    val = rep.residual("identity_sup").value
    ok = rep.verdict == "pass" and val <= 1e-6
    _line("second-order identity on the rotational flow", val, 1e-6, ok)
    assert ok


def test_02_battery_classification_agreement():
    wrong = []
    for bench in battery():
        rep = dynamic_gradient_test(bench.spec, bench.density())
        if rep.extras["classification"] != bench.expected:
            wrong.append(bench.name)
        if not rep.extras["agrees_with_static"]:
            wrong.append(bench.name + " (static disagrees)")
    ok = not wrong
    _line("benchmark battery classification agreement", 20 - len(wrong), 20, ok)
    assert ok, f"misclassified: {wrong}"


def test_03_one_dim_second_order_gaps():
    worst = 0.0
    for bench in one_dim_battery():
        rep = dynamic_gradient_test(bench.spec, bench.density(), tol=5e-3)
        worst = max(worst, rep.residual("second_order_gap_sup").value)
        assert rep.verdict == "pass", bench.name
    ok = worst <= 5e-3
    _line("forward/backward second derivative gap (1-d gradient drifts)", worst, 5e-3, ok)
    assert ok


def test_04_stationarity_detection_both_modes(big_ou_ensemble):
    spec = ou_spec()
    g = GridSpec([-4.0], [4.0], (161,))
    p = stationary_density(spec.drift, 1.0, g)

    rep_a = stationarity_check(spec, p)
    rep_e = stationarity_check(
        spec, p, mode="empirical", ensemble=big_ou_ensemble,
        t=2.0, h_lag=0.01, bandwidth=0.10, pool=True,
    )
    # a transient law must be rejected by both routes: start at N(3, 0.25),
    # look at t = 0.05 where the exact marginal is still far from stationary
    m, v = ou_marginal(1.0, 1.0, 0.05, [3.0], 0.25)
    gt = GridSpec([-0.5], [6.5], (141,))
    pt = gaussian_density(gt, m, v * np.eye(1), t=0.05)
    spec_t = DiffusionSpec(
        drift=spec.drift, sigma=1.0,
        initial_law=GaussianLaw(np.array([3.0]), 0.25 * np.eye(1)), horizon=0.2,
    )
    ens_t = euler_maruyama(spec_t, 100_000, 20, seed=21)
    rep_ta = stationarity_check(spec_t, pt)
    rep_te = stationarity_check(
        spec_t, pt, mode="empirical", ensemble=ens_t,
        t=0.05, h_lag=0.01, bandwidth=0.10, pool=False,
    )

    wrms = rep_e.residual("stationarity_wrms").value
    ok = (
        rep_a.verdict == "pass"
        and rep_e.verdict == "pass"
        and rep_ta.verdict == "fail"
        and rep_ta.residual("stationarity_sup").value >= 1.0
        and rep_te.verdict == "fail"
        and rep_te.residual("stationarity_wrms").value >= 1.0
    )
    _line("stationarity detected (analytic and empirical)", wrms, 0.15, ok)
    assert ok


def test_05_reversibility_separates_gradient_flows(big_ou_ensemble):
    rep_ou = reversibility_check(ou_spec(), 0, 0, seed=11, lag=0.5,
                                 ensemble=big_ou_ensemble)
    z_ou = rep_ou.residual("reversibility_zmax").value
    bench = rotational_stationary()
    rep_rot = reversibility_check(bench.spec, 40_000, 400, seed=77, lag=0.5)
    z_rot = rep_rot.residual("reversibility_zmax").value
    ok = (rep_ou.verdict == "pass" and z_ou < 4.0
          and rep_rot.verdict == "fail" and z_rot > 50.0)
    _line("reversibility z (gradient flow)", z_ou, 4.0, ok)
    _line("reversibility z (rotational flow, must exceed)", z_rot, 50.0, ok)
    assert ok


def test_06_density_evolution_accuracy():
    g = GridSpec([-6.0], [6.0], (1025,))
    drift = builtin_drift("ou", (1.0,), dim=1)

    # relaxation toward the exact time marginal
    spec = DiffusionSpec(
        drift=drift, sigma=1.0,
        initial_law=GaussianLaw(np.array([3.0]), 0.25 * np.eye(1)), horizon=2.0,
    )
    init = gaussian_density(g, [3.0], [[0.25]])
    series = fokker_planck_solve(spec, init, n_time_steps=fokker_planck_stable_steps(spec, g))
    m2, v2 = ou_marginal(1.0, 1.0, 2.0, [3.0], 0.25)
    exact = gaussian_density(g, m2, v2 * np.eye(1), t=2.0)
    err_relax = l1_distance(series.final(), exact.values)

    # free diffusion against the heat kernel
    free = builtin_drift("custom_linear", (0.0,), dim=1)
    spec_h = DiffusionSpec(
        drift=free, sigma=1.0,
        initial_law=GaussianLaw(np.zeros(1), 0.25 * np.eye(1)), horizon=0.5,
    )
    init_h = gaussian_density(g, [0.0], [[0.25]])
    series_h = fokker_planck_solve(spec_h, init_h,
                                   n_time_steps=fokker_planck_stable_steps(spec_h, g))
    exact_h = gaussian_density(g, [0.0], [[0.75]], t=0.5)
    err_heat = l1_distance(series_h.final(), exact_h.values)

    # the stationary law must hold still
    stat = stationary_density(drift, 1.0, g)
    spec_s = DiffusionSpec(drift=drift, sigma=1.0,
                           initial_law=GaussianLaw(np.zeros(1), 0.5 * np.eye(1)),
                           horizon=2.0)
    series_s = fokker_planck_solve(spec_s, stat,
                                   n_time_steps=fokker_planck_stable_steps(spec_s, g))
    err_hold = l1_distance(series_s.final(), stat.values)
    mass = max(series.mass_drift, series_h.mass_drift, series_s.mass_drift)

    ok = err_relax <= 2e-2 and err_heat <= 1e-4 and err_hold <= 1e-2 and mass <= 1e-4
    _line("density evolution: relaxation L1", err_relax, 2e-2, ok)
    _line("density evolution: heat kernel L1", err_heat, 1e-4, ok)
    _line("density evolution: stationary hold L1", err_hold, 1e-2, ok)
    _line("density evolution: mass drift", mass, 1e-4, ok)
    assert ok


def test_07_lag_extrapolation_controls_bias(big_ou_ensemble):
    # the lag-h estimator of D+ carries O(h) bias; a 1/h^2-weighted linear
    # fit over h in {0.04, 0.02, 0.01} extrapolated to h = 0 must land on
    # the drift far more tightly than any single lag
    g = GridSpec([-4.0], [4.0], (161,))
    spec = ou_spec()
    p = stationary_density(spec.drift, 1.0, g)
    lags = (0.04, 0.02, 0.01)
    results = []
    for seed in (11, 12, 13):
        ens = big_ou_ensemble if seed == 11 else euler_maruyama(spec, 100_000, 400, seed=seed)
        ests, masks = [], []
        for h in lags:
            f = empirical_derivative(ens, 2.0, h, "forward", g, bandwidth=0.10, pool=True)
            ests.append(f.values[..., 0])
            masks.append(f.mask)
        mask = masks[0] & masks[1] & masks[2] & p.bulk_mask()
        w = np.array([1.0 / h**2 for h in lags])
        hs = np.array(lags)
        s0, s1, s2 = w.sum(), (w * hs).sum(), (w * hs**2).sum()
        y = np.stack(ests, axis=0)
        y0 = np.tensordot(w, y, axes=1)
        y1 = np.tensordot(w * hs, y, axes=1)
        extrap = (s2 * y0 - s1 * y1) / (s0 * s2 - s1**2)
        err = weighted_rms(extrap + g.axes[0], p, mask)
        results.append(err)
        del ens
    worst = max(results)
    ok = worst <= 0.05
    _line("lag extrapolation of the forward derivative", worst, 0.05, ok)
    assert ok


def test_08_variation_identity_replicates():
    drift = builtin_drift("ou", (1.0,), dim=1)
    spec = DiffusionSpec(drift=drift, sigma=1.0,
                         initial_law=GaussianLaw(np.zeros(1), 0.5 * np.eye(1)),
                         horizon=1.0)
    gamma = VectorField(dim=1, eval_fn=lambda x: np.ones_like(x))
    worst_gap = 0.0
    ok = True
    for seed in (31, 32, 33):
        rep = girsanov_variation_check(spec, gamma, eps_list=(0.01, 0.02),
                                       n_paths=100_000, n_steps=100, seed=seed)
        gap = rep.residual("variation_gap").value
        worst_gap = max(worst_gap, gap)
        ok &= rep.verdict == "pass"
        # both sides must bracket the closed-form derivative 1 - 1/e up to
        # Monte Carlo error and the O(dt) Euler discretization shift
        dt_allow = 0.25 * (1.0 / 100)
        for side in ("lhs", "rhs"):
            dev = abs(rep.extras[f"{side}_mean"] - EXACT_EXPECTATION_STEP)
            allow = 3.0 * rep.extras[f"{side}_se"] + dt_allow
            ok &= dev <= allow
    _line("variation identity paired gap (3 seeds)", worst_gap, 1.0, ok)
    assert ok


def test_09_newton_embedding_imaginary_part():
    worst = 0.0
    for bench in gradient_stationary_battery():
        rep = newton_residual(bench.spec, bench.density(), tol_imag=5e-3)
        worst = max(worst, rep.residual("newton_imag_sup").value)
        assert rep.verdict == "pass", bench.name
    ok = worst <= 5e-3
    _line("imaginary part of the complex second derivative", worst, 5e-3, ok)
    assert ok


def test_10_canonical_report_bytes(tmp_path):
    cfg = load_bundled_scenario("double_well_gibbs")
    blobs = []
    for tag in ("a", "b"):
        result = run_scenario(cfg)
        out = tmp_path / tag
        export_run(result, str(out), canonical=True, figures=False)
        blobs.append(((out / "report.json").read_bytes(),
                      (out / "manifest.json").read_bytes()))
    ok = blobs[0] == blobs[1] and result.exit_code == 0
    _line("canonical rerun byte-identity", float(blobs[0] == blobs[1]), 1.0, ok)
    assert ok
