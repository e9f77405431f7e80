"""Tests for drift fields, the antisymmetric part, and the static curl test."""

import numpy as np
import pytest

from nelsonlab.model import (
    AntisymmetricPart,
    DiffusionSpec,
    GaussianLaw,
    PointMass,
    VectorField,
    antisymmetric_part,
    builtin_drift,
    default_probes,
    gradient_test_static,
    linear_drift,
)


class TestBuiltinDrifts:
    def test_ou_values_and_potential(self):
        b = builtin_drift("ou", (2.0,), dim=1)
        x = np.array([[1.5], [-0.25]])
        np.testing.assert_allclose(b(x), [[-3.0], [0.5]])
        # U = -theta x^2 / 2 at x = 1.5: -2.25
        assert b.potential_fn(np.array([1.5])) == pytest.approx(-2.25)
        np.testing.assert_allclose(b.grad_potential_fn(x), b(x))

    def test_double_well_fixed_points(self):
        b = builtin_drift("double_well")
        for root in (-1.0, 0.0, 1.0):
            assert b(np.array([root]))[0] == pytest.approx(0.0, abs=1e-15)
        # b(0.5) = 0.5 - 0.125 = 0.375
        assert b(np.array([0.5]))[0] == pytest.approx(0.375)

    def test_rotational_matrix(self):
        b = builtin_drift("rotational_linear")
        x = np.array([1.0, 2.0])
        # A = [[-1,-1],[1,-1]]: A (1,2) = (-3, -1); single points come back batched
        np.testing.assert_allclose(b(x), [[-3.0, -1.0]])
        assert b.potential_fn is None

    def test_shear_jacobian(self):
        b = builtin_drift("shear", (2.0,))
        J = b.jacobian(np.zeros(2))
        np.testing.assert_allclose(J, [[[-1.0, 2.0], [0.0, -1.0]]])

    def test_custom_linear_symmetric_has_potential(self):
        b = builtin_drift("custom_linear", (-2.0, 0.5, 0.5, -1.0))
        assert b.potential_fn is not None
        x = np.array([1.0, -1.0])
        # U = x^T A x / 2 for symmetric A
        A = np.array([[-2.0, 0.5], [0.5, -1.0]])
        assert b.potential_fn(x) == pytest.approx(0.5 * x @ A @ x)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            builtin_drift("levy_flight")

    def test_ou_needs_positive_theta(self):
        with pytest.raises(ValueError):
            builtin_drift("ou", (-1.0,))


class TestJacobianFallback:
    def test_finite_difference_matches_exact(self):
        # same field with and without an analytic Jacobian
        exact = builtin_drift("double_well")
        fd = VectorField(dim=1, eval_fn=lambda x: x - x**3, name="dw_fd")
        pts = np.array([[0.3], [-1.2], [2.0]])
        np.testing.assert_allclose(fd.jacobian(pts), exact.jacobian(pts), atol=1e-7)

    def test_fd_laplacian_on_cubic(self):
        fd = VectorField(dim=1, eval_fn=lambda x: x - x**3, name="dw_fd")
        # Lap b = -6x
        pts = np.array([[0.5], [-1.0]])
        np.testing.assert_allclose(
            fd.laplacian(pts), [[-3.0], [6.0]], rtol=1e-4, atol=1e-4
        )


class TestAntisymmetricPart:
    def test_rotational_G_is_constant(self):
        G = antisymmetric_part(builtin_drift("rotational_linear"))
        # J = A^T rows? G[i,j] = d_i b^j - d_j b^i; for b = Ax, G = A - A^T... with
        # A = [[-1,-1],[1,-1]] the off-diagonal is -1 - 1 = -2 below, +2 above.
        val = G(np.array([0.3, -0.7]))
        np.testing.assert_allclose(val, [[[0.0, 2.0], [-2.0, 0.0]]], atol=1e-12)

    def test_gradient_drift_G_vanishes(self):
        G = antisymmetric_part(builtin_drift("custom_linear", (-2.0, 0.5, 0.5, -1.0)))
        pts = default_probes(2, n=16, seed=3)
        assert G.max_entry(pts) == pytest.approx(0.0, abs=1e-12)

    def test_div_rows_linear_drift_is_zero(self):
        # for linear drifts Lap b = 0 and div b is constant, so div G_i = 0
        G = AntisymmetricPart(builtin_drift("rotational_linear"))
        pts = np.array([[0.0, 0.0], [1.0, 2.0]])
        np.testing.assert_allclose(G.div_rows(pts), np.zeros((2, 2)), atol=1e-12)


class TestStaticGradientTest:
    def test_one_dimensional_always_gradient(self):
        verdict, residual = gradient_test_static(builtin_drift("double_well"))
        assert verdict == "gradient"
        assert residual == 0.0

    def test_rotational_flagged(self):
        verdict, residual = gradient_test_static(builtin_drift("rotational_linear"))
        assert verdict == "non_gradient"
        assert residual == pytest.approx(2.0, abs=1e-10)

    def test_shear_residual_equals_s(self):
        verdict, residual = gradient_test_static(builtin_drift("shear", (0.75,)))
        assert verdict == "non_gradient"
        assert residual == pytest.approx(0.75, abs=1e-8)

    def test_symmetric_linear_is_gradient(self):
        verdict, _ = gradient_test_static(linear_drift([[-1.0, 0.3], [0.3, -2.0]]))
        assert verdict == "gradient"


class TestLawsAndSpec:
    def test_point_mass_sampling(self):
        law = PointMass([1.0, -2.0])
        rng = np.random.default_rng(0)
        s = law.sample(rng, 5)
        assert s.shape == (5, 2)
        np.testing.assert_allclose(s, np.tile([1.0, -2.0], (5, 1)))

    def test_gaussian_law_moments(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        law = GaussianLaw(np.array([1.0, 0.0]), cov)
        rng = np.random.default_rng(42)
        s = law.sample(rng, 200_000)
        np.testing.assert_allclose(s.mean(axis=0), [1.0, 0.0], atol=0.02)
        np.testing.assert_allclose(np.cov(s.T), cov, atol=0.03)

    def test_gaussian_law_rejects_asymmetric_cov(self):
        with pytest.raises(ValueError):
            GaussianLaw(np.zeros(2), np.array([[1.0, 0.3], [0.0, 1.0]]))

    def test_spec_validation(self):
        b = builtin_drift("ou", (1.0,), dim=2)
        with pytest.raises(ValueError):
            DiffusionSpec(drift=b, sigma=-0.5, initial_law=PointMass([0.0, 0.0]), horizon=1.0)
        with pytest.raises(ValueError):
            DiffusionSpec(drift=b, sigma=1.0, initial_law=PointMass([0.0, 0.0]), horizon=0.0)
        with pytest.raises(ValueError):
            DiffusionSpec(drift=b, sigma=1.0, initial_law=PointMass([0.0]), horizon=1.0)

    def test_sigma_zero_accepted(self):
        b = builtin_drift("ou")
        spec = DiffusionSpec(drift=b, sigma=0.0, initial_law=PointMass([1.0]), horizon=1.0)
        assert spec.sigma == 0.0

    def test_descriptor_is_json_friendly(self):
        import json

        b = builtin_drift("ou", (1.5,))
        spec = DiffusionSpec(drift=b, sigma=0.5, initial_law=PointMass([0.0]), horizon=2.0)
        blob = json.dumps(spec.descriptor())
        assert "ou" in blob
