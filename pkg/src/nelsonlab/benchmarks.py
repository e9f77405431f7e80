"""Frozen benchmark specs with exact stationary laws.

Every entry couples a drift with a grid sized so the stationary density's
boundary layer is negligible, plus the closed-form density itself: Gibbs
exp(2U/sigma^2) for gradient drifts, the Lyapunov Gaussian for linear ones.
The battery is balanced between gradient and non-gradient drifts and sweeps
sigma, so classifier checks can't key on anything but the geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .density import (
    DensityField,
    DensityTimeSeries,
    GridSpec,
    gaussian_density,
    stationary_density,
    stationary_gaussian_linear,
)
from .model import DiffusionSpec, GaussianLaw, VectorField, builtin_drift, linear_drift

__all__ = [
    "Benchmark",
    "battery",
    "one_dim_battery",
    "gradient_stationary_battery",
    "rotational_stationary",
    "quartic_drift",
    "sine_well_drift",
    "product_double_well_drift",
    "ou_marginal",
    "ou_gaussian_series",
]


def quartic_drift() -> VectorField:
    """b = -x^3 with potential U = -x^4/4 (flat-bottomed confinement)."""
    return VectorField(
        dim=1,
        eval_fn=lambda x: -(x**3),
        jacobian_fn=lambda x: (-3.0 * x**2)[..., None],
        potential_fn=lambda x: -0.25 * x[..., 0] ** 4,
        grad_potential_fn=lambda x: -(x**3),
        laplacian_fn=lambda x: -6.0 * x,
        grad_div_fn=lambda x: -6.0 * x,
        name="quartic",
    )


def sine_well_drift(a: float = 0.5) -> VectorField:
    """b = -x - a sin x with potential U = -x^2/2 + a cos x (rippled well)."""
    return VectorField(
        dim=1,
        eval_fn=lambda x: -x - a * np.sin(x),
        jacobian_fn=lambda x: (-1.0 - a * np.cos(x))[..., None],
        potential_fn=lambda x: -0.5 * x[..., 0] ** 2 + a * np.cos(x[..., 0]),
        grad_potential_fn=lambda x: -x - a * np.sin(x),
        laplacian_fn=lambda x: a * np.sin(x),
        grad_div_fn=lambda x: a * np.sin(x),
        name="sine_well",
        params=(a,),
    )


def product_double_well_drift() -> VectorField:
    """b_i = x_i - x_i^3 per axis in d = 2; U = sum_i (x_i^2/2 - x_i^4/4)."""

    def jac(x):
        J = np.zeros(x.shape + (2,))
        for i in range(2):
            J[..., i, i] = 1.0 - 3.0 * x[..., i] ** 2
        return J

    return VectorField(
        dim=2,
        eval_fn=lambda x: x - x**3,
        jacobian_fn=jac,
        potential_fn=lambda x: np.sum(0.5 * x**2 - 0.25 * x**4, axis=-1),
        grad_potential_fn=lambda x: x - x**3,
        laplacian_fn=lambda x: -6.0 * x,
        grad_div_fn=lambda x: -6.0 * x,
        name="product_double_well",
    )


@dataclass(frozen=True)
class Benchmark:
    """A drift + sigma with its exact stationary density on a frozen grid."""

    name: str
    spec: DiffusionSpec
    expected: str  # "gradient" | "non_gradient"
    _density_fn: Callable[[], DensityField]

    def density(self) -> DensityField:
        return self._density_fn()


def _gauss_box(cov: np.ndarray, radii: float = 4.8) -> tuple:
    sd = np.sqrt(np.diag(cov))
    half = np.ceil(radii * sd * 20.0) / 20.0
    return -half, half


def _linear_benchmark(name: str, A, sigma: float, nodes: int = 160, expected="non_gradient") -> Benchmark:
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    drift = linear_drift(A, name=name) if name not in ("rotational_linear", "shear") else None
    if name == "rotational_linear":
        drift = builtin_drift("rotational_linear")
    elif name == "shear":
        raise ValueError("use _shear_benchmark")
    from scipy.linalg import solve_continuous_lyapunov

    S = solve_continuous_lyapunov(A, -sigma**2 * np.eye(d))
    lo, hi = _gauss_box(S)
    grid = GridSpec(lo, hi, (nodes,) * d)
    spec = DiffusionSpec(drift=drift, sigma=sigma, initial_law=GaussianLaw(np.zeros(d), S), horizon=2.0)
    return Benchmark(
        name=f"{name}_sigma{sigma:g}",
        spec=spec,
        expected=expected,
        _density_fn=lambda: stationary_gaussian_linear(A, sigma, grid),
    )


def _shear_benchmark(s: float, sigma: float, nodes: int = 160) -> Benchmark:
    drift = builtin_drift("shear", (s,))
    A = np.array([[-1.0, s], [0.0, -1.0]])
    from scipy.linalg import solve_continuous_lyapunov

    S = solve_continuous_lyapunov(A, -sigma**2 * np.eye(2))
    lo, hi = _gauss_box(S)
    grid = GridSpec(lo, hi, (nodes, nodes))
    spec = DiffusionSpec(drift=drift, sigma=sigma, initial_law=GaussianLaw(np.zeros(2), S), horizon=2.0)
    return Benchmark(
        name=f"shear{s:g}_sigma{sigma:g}",
        spec=spec,
        expected="non_gradient" if s != 0 else "gradient",
        _density_fn=lambda: stationary_gaussian_linear(A, sigma, grid),
    )


def _gibbs_benchmark(
    name: str, drift: VectorField, sigma: float, half_width, nodes, horizon: float = 2.0
) -> Benchmark:
    half = np.broadcast_to(np.asarray(half_width, dtype=float), (drift.dim,))
    nn = (nodes,) * drift.dim if np.isscalar(nodes) else tuple(nodes)
    grid = GridSpec(-half, half, nn)
    # a Gaussian init wide enough to be sensible if someone simulates it
    var0 = (half.max() / 4.0) ** 2
    spec = DiffusionSpec(
        drift=drift, sigma=sigma,
        initial_law=GaussianLaw(np.zeros(drift.dim), var0 * np.eye(drift.dim)),
        horizon=horizon,
    )
    return Benchmark(
        name=f"{name}_sigma{sigma:g}",
        spec=spec,
        expected="gradient",
        _density_fn=lambda: stationary_density(drift, sigma, grid),
    )


def battery() -> list:
    """Twenty stationary benchmarks, ten gradient and ten not."""
    out = [
        _gibbs_benchmark("ou", builtin_drift("ou"), 1.0, 4.0, 513),
        _gibbs_benchmark("ou", builtin_drift("ou"), 0.5, 2.2, 513),
        _gibbs_benchmark("ou", builtin_drift("ou"), 2.0, 7.6, 513),
        _gibbs_benchmark("ou_theta2", builtin_drift("ou", (2.0,)), 1.0, 3.0, 513),
        _gibbs_benchmark("ou_2d", builtin_drift("ou", (1.0,), dim=2), 1.0, 4.0, 160),
        _gibbs_benchmark("double_well", builtin_drift("double_well"), 0.7, 2.4, 1025),
        _gibbs_benchmark("double_well", builtin_drift("double_well"), 1.0, 2.7, 1025),
        _gibbs_benchmark("double_well", builtin_drift("double_well"), 1.4, 3.2, 2049),
        _linear_benchmark("sym_linear", [[-2.0, 0.5], [0.5, -1.0]], 1.0, expected="gradient"),
        _gibbs_benchmark("product_double_well", product_double_well_drift(), 1.0, 2.4, 768),
        _linear_benchmark("rotational_linear", [[-1.0, -1.0], [1.0, -1.0]], 0.5),
        _linear_benchmark("rotational_linear", [[-1.0, -1.0], [1.0, -1.0]], 0.7),
        _linear_benchmark("rotational_linear", [[-1.0, -1.0], [1.0, -1.0]], 1.0),
        _linear_benchmark("rotational_linear", [[-1.0, -1.0], [1.0, -1.0]], 2.0),
        _shear_benchmark(1.0, 1.0),
        _shear_benchmark(2.0, 1.0),
        _shear_benchmark(1.0, math.sqrt(2.0)),
        _shear_benchmark(0.5, 1.0),
        _linear_benchmark("asym_linear_a", [[-1.0, -2.0], [1.0, -1.0]], 1.0),
        _linear_benchmark("asym_linear_b", [[-0.5, -1.0], [1.0, -0.5]], 1.0),
    ]
    assert len(out) == 20
    return out


def one_dim_battery() -> list:
    """Five distinct 1-d gradient drifts with Gibbs densities on fine grids."""
    return [
        _gibbs_benchmark("ou", builtin_drift("ou"), 1.0, 4.0, 1025),
        _gibbs_benchmark("ou_theta2", builtin_drift("ou", (2.0,)), 1.0, 3.0, 1025),
        _gibbs_benchmark("double_well", builtin_drift("double_well"), 1.0, 2.7, 1025),
        _gibbs_benchmark("quartic", quartic_drift(), 1.0, 2.7, 1025),
        _gibbs_benchmark("sine_well", sine_well_drift(), 1.0, 4.0, 1025),
    ]


def gradient_stationary_battery() -> list:
    """Every gradient benchmark of the battery (potential known), for the
    Newton-embedding and stationarity sweeps."""
    return [b for b in battery() if b.expected == "gradient"]


def rotational_stationary(nodes: int = 256) -> Benchmark:
    """The rotational drift at sigma = 1 with its N(0, I/2) stationary law.

    Closed forms on this benchmark: G = [[0, 2], [-2, 0]],
    D-^2 - D+^2 = (-4y, 4x), stationarity residual 2(A + I)x = 2(-y, x).
    """
    A = [[-1.0, -1.0], [1.0, -1.0]]
    b = _linear_benchmark("rotational_linear", A, 1.0, nodes=nodes)
    return b


def ou_marginal(theta: float, sigma: float, t: float, mean0, var0) -> tuple:
    """Exact marginal (mean, var) of d-dim isotropic ou at time t."""
    mean0 = np.atleast_1d(np.asarray(mean0, dtype=float))
    decay = math.exp(-theta * t)
    mean = mean0 * decay
    var = var0 * decay**2 + sigma**2 * (1.0 - decay**2) / (2.0 * theta)
    return mean, var


def ou_gaussian_series(
    theta: float,
    sigma: float,
    mean0,
    var0: float,
    grid: GridSpec,
    horizon: float,
    n_slices: int = 41,
) -> DensityTimeSeries:
    """Exact Gaussian marginal series of the ou diffusion (isotropic init)."""
    times = np.linspace(0.0, horizon, n_slices)
    vals = np.empty((n_slices,) + grid.shape)
    for k, t in enumerate(times):
        m, v = ou_marginal(theta, sigma, float(t), mean0, var0)
        vals[k] = gaussian_density(grid, m, v * np.eye(grid.dim), t=float(t)).values
    return DensityTimeSeries(grid, times, vals)
