"""Tests for grids, densities, the score field, and the grid solver."""

import numpy as np
import pytest

from nelsonlab.density import (
    CFLError,
    DensityField,
    GridLaw,
    GridSpec,
    fokker_planck_solve,
    fokker_planck_stable_steps,
    gaussian_density,
    interp_field,
    kde,
    score,
    stationary_density,
    stationary_gaussian_linear,
)
from nelsonlab.model import DiffusionSpec, PointMass, builtin_drift


def ou_spec(theta=1.0, sigma=1.0, horizon=2.0, x0=0.0):
    b = builtin_drift("ou", (theta,), dim=1)
    return DiffusionSpec(drift=b, sigma=sigma, initial_law=PointMass([x0]), horizon=horizon)


class TestGridSpec:
    def test_spacing_and_axes(self):
        g = GridSpec([-2.0], [2.0], (17,))
        assert g.dim == 1
        assert g.spacing[0] == pytest.approx(0.25)
        assert g.axes[0][0] == -2.0 and g.axes[0][-1] == 2.0

    def test_refine_doubles_resolution(self):
        g = GridSpec([-1.0, -1.0], [1.0, 1.0], (21, 41))
        r = g.refine(2)
        assert r.nodes == (41, 81)
        np.testing.assert_allclose(r.spacing, np.asarray(g.spacing) / 2)

    def test_trapezoid_weights_integrate_one(self):
        g = GridSpec([-3.0], [3.0], (61,))
        w = g.trapezoid_weights()
        # integral of the constant 1/6 over [-3, 3] is 1
        assert np.sum(w / 6.0) == pytest.approx(1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec([0.0], [-1.0], (32,))
        with pytest.raises(ValueError):
            GridSpec([0.0], [1.0], (8,))
        with pytest.raises(ValueError):
            GridSpec([0.0] * 3, [1.0] * 3, (32,) * 3)


class TestDensities:
    def test_gaussian_density_normalized(self):
        g = GridSpec([-5.0], [5.0], (201,))
        p = gaussian_density(g, [0.5], [[0.8]])
        assert np.sum(p.values * g.trapezoid_weights()) == pytest.approx(1.0, abs=1e-12)
        # box truncation at +-5 (5.6 sd) leaves moment errors at the 1e-6 level
        assert p.mean()[0] == pytest.approx(0.5, abs=1e-5)
        assert p.cov()[0, 0] == pytest.approx(0.8, abs=1e-4)

    def test_score_exact_for_gaussian(self):
        # grad log p = -(x - m) / v; the central stencil is exact for quadratics
        g = GridSpec([-4.0], [4.0], (101,))
        p = gaussian_density(g, [1.0], [[2.0]])
        s, valid = score(p)  # valid has the grid's shape
        x = g.axes[0]
        expected = -(x - 1.0) / 2.0
        np.testing.assert_allclose(s[valid, 0], expected[valid], atol=1e-10)

    def test_stationary_density_double_well_shape(self):
        b = builtin_drift("double_well")
        g = GridSpec([-2.7], [2.7], (301,))
        p = stationary_density(b, 1.0, g)
        x = g.axes[0]
        # Gibbs p ~ exp(2U), U = x^2/2 - x^4/4: maxima at +-1, local min at 0
        i0 = np.argmin(np.abs(x))
        i1 = np.argmin(np.abs(x - 1.0))
        assert p.values[i1] > p.values[i0]
        # symmetry
        np.testing.assert_allclose(p.values, p.values[::-1], atol=1e-12)

    def test_stationary_density_needs_potential(self):
        b = builtin_drift("rotational_linear")
        g = GridSpec([-3.0, -3.0], [3.0, 3.0], (31, 31))
        with pytest.raises(ValueError):
            stationary_density(b, 1.0, g)

    def test_stationary_density_boundary_guard(self):
        # a box too small to hold the mass must be refused
        b = builtin_drift("ou", (0.05,))
        g = GridSpec([-1.0], [1.0], (64,))  # sd ~ 3.16, box +-1
        with pytest.raises(ValueError):
            stationary_density(b, 1.0, g)

    def test_lyapunov_gaussian_rotational(self):
        # A = [[-1,-1],[1,-1]]: A + A^T = -2I, so S = (sigma^2/2) I solves
        # A S + S A^T + sigma^2 I = 0
        g = GridSpec([-3.5, -3.5], [3.5, 3.5], (61, 61))
        p = stationary_gaussian_linear([[-1.0, -1.0], [1.0, -1.0]], 1.0, g)
        C = p.cov()
        np.testing.assert_allclose(C, 0.5 * np.eye(2), atol=2e-3)

    def test_lyapunov_rejects_unstable(self):
        g = GridSpec([-3.0, -3.0], [3.0, 3.0], (31, 31))
        with pytest.raises(ValueError):
            stationary_gaussian_linear([[1.0, 0.0], [0.0, -1.0]], 1.0, g)


class TestKde:
    def test_kde_recovers_gaussian_moments(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(0.3, 1.1, size=(200_000, 1))
        g = GridSpec([-6.0], [6.0], (301,))
        p = kde(samples, g)
        assert p.mean()[0] == pytest.approx(0.3, abs=0.02)
        # KDE inflates variance by bw^2; generous tolerance
        assert p.cov()[0, 0] == pytest.approx(1.21, abs=0.05)

    def test_kde_bandwidth_override(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(size=(5000, 1))
        g = GridSpec([-5.0], [5.0], (201,))
        wide = kde(samples, g, bandwidth=1.0)
        narrow = kde(samples, g, bandwidth=0.05)
        # wider kernel lowers the peak
        assert wide.values.max() < narrow.values.max()


class TestGridLaw:
    def test_samples_match_density_moments(self):
        g = GridSpec([-4.0], [4.0], (401,))
        p = gaussian_density(g, [0.0], [[1.0]])
        law = GridLaw(p)
        rng = np.random.default_rng(1)
        s = law.sample(rng, 100_000)
        assert s.shape == (100_000, 1)
        assert np.all(s >= -4.0) and np.all(s <= 4.0)
        assert s.mean() == pytest.approx(0.0, abs=0.02)
        assert s.var() == pytest.approx(1.0, abs=0.03)


class TestFokkerPlanck:
    def test_step_refusal_carries_suggestion(self):
        spec = ou_spec()
        g = GridSpec([-6.0], [6.0], (257,))
        needed = fokker_planck_stable_steps(spec, g)
        with pytest.raises(CFLError) as err:
            fokker_planck_solve(spec, gaussian_density(g, [0.0], [[0.25]]), n_time_steps=needed // 2)
        assert err.value.suggested_steps == needed

    def test_heat_kernel_oracle(self):
        # zero drift: the solution of an initial Gaussian stays Gaussian with
        # variance v0 + sigma^2 t
        free = builtin_drift("custom_linear", (0.0,))
        spec = DiffusionSpec(drift=free, sigma=1.0, initial_law=PointMass([0.0]), horizon=0.5)
        g = GridSpec([-6.0], [6.0], (513,))
        init = gaussian_density(g, [0.0], [[0.25]])
        series = fokker_planck_solve(spec, init, n_time_steps=fokker_planck_stable_steps(spec, g))
        final = series.final()
        target = gaussian_density(g, [0.0], [[0.75]], t=0.5)
        l1 = np.sum(np.abs(final.values - target.values) * g.trapezoid_weights())
        assert l1 < 2e-3
        assert series.mass_drift < 1e-6

    def test_ou_relaxes_toward_gibbs(self):
        spec = ou_spec(horizon=4.0)
        g = GridSpec([-6.0], [6.0], (257,))
        init = gaussian_density(g, [2.0], [[0.25]])
        series = fokker_planck_solve(spec, init, n_time_steps=fokker_planck_stable_steps(spec, g))
        target = gaussian_density(g, [0.0], [[0.5]])
        l1 = np.sum(np.abs(series.final().values - target.values) * g.trapezoid_weights())
        assert l1 < 0.05  # first-order upwind on a modest grid

    def test_slice_lookup(self):
        spec = ou_spec(horizon=1.0)
        g = GridSpec([-5.0], [5.0], (129,))
        init = gaussian_density(g, [0.0], [[0.5]])
        series = fokker_planck_solve(
            spec, init, n_time_steps=fokker_planck_stable_steps(spec, g), n_slices=11
        )
        assert len(series.times) == 11
        mid = series.at_time(0.5)
        assert mid.t == pytest.approx(0.5)
        with pytest.raises(ValueError):
            series.at_time(0.543)  # not a stored slice


class TestInterp:
    def test_linear_interpolation_1d(self):
        g = GridSpec([0.0], [1.0], (21,))
        vals = g.axes[0] ** 2  # interp of x^2 is exact at nodes, close between
        out = interp_field(g, vals, np.array([[0.5], [0.525]]))
        assert out[0] == pytest.approx(0.25)
        assert out[1] == pytest.approx(0.525**2, abs=1e-3)

    def test_outside_grid_raises(self):
        g = GridSpec([0.0], [1.0], (21,))
        vals = np.zeros(21)
        with pytest.raises(ValueError):
            interp_field(g, vals, np.array([[1.5]]))
