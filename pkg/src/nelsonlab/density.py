"""Densities on grids: Fokker-Planck evolution, KDE, scores, stationary laws.

Grids are uniform tensor grids in d <= 2 (higher-dimensional work goes
through sample ensembles, not grids). Densities are normalized so the
trapezoidal mass equals one; scores are central differences of log p with
one-sided second-order edges, exact for Gaussian densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from . import _smooth
from .model import DiffusionSpec, VectorField

__all__ = [
    "GridSpec",
    "DensityField",
    "DensityTimeSeries",
    "GridLaw",
    "CFLError",
    "fokker_planck_solve",
    "kde",
    "score",
    "stationary_density",
    "stationary_gaussian_linear",
    "gaussian_density",
    "interp_field",
]

DENSITY_FLOOR_RATIO = 1e-12  # positivity floor relative to max p
BULK_RATIO = 1e-3            # bulk = {p >= BULK_RATIO * max p}


class CFLError(ValueError):
    """Explicit Fokker-Planck step count violates the stability bound."""

    def __init__(self, message: str, suggested_steps: int):
        super().__init__(message)
        self.suggested_steps = suggested_steps


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Uniform tensor grid on a box, d in {1, 2}, >= 16 nodes per axis."""

    lower: np.ndarray
    upper: np.ndarray
    nodes: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        nn = tuple(int(n) for n in np.atleast_1d(self.nodes))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower/upper must be 1-d of equal length")
        if len(nn) != lo.shape[0]:
            raise ValueError("nodes must give one count per axis")
        if lo.shape[0] not in (1, 2):
            raise ValueError("grids support d in {1, 2}")
        if np.any(hi <= lo):
            raise ValueError("upper must exceed lower on every axis")
        if any(n < 16 for n in nn):
            raise ValueError("need >= 16 nodes per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "nodes", nn)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.asarray(self.nodes) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(self.lower[ax], self.upper[ax], self.nodes[ax]) for ax in range(self.dim)]

    def points(self) -> np.ndarray:
        """All nodes, shape grid.shape + (d,)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def trapezoid_weights(self) -> np.ndarray:
        """Quadrature weights of shape grid.shape (product trapezoid rule)."""
        w = np.ones(self.shape)
        for ax in range(self.dim):
            wa = np.full(self.nodes[ax], self.spacing[ax])
            wa[0] *= 0.5
            wa[-1] *= 0.5
            sl = [None] * self.dim
            sl[ax] = slice(None)
            w = w * wa[tuple(sl)]
        return w

    def refine(self, factor: int = 2) -> "GridSpec":
        """Same box with spacing divided by factor."""
        return GridSpec(self.lower, self.upper, tuple((n - 1) * factor + 1 for n in self.nodes))

    def describe(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "nodes": list(self.nodes),
        }

    def __eq__(self, other):
        return isinstance(other, GridSpec) and self.describe() == other.describe()

    def __hash__(self):
        return hash((tuple(self.lower), tuple(self.upper), self.nodes))


@dataclass(frozen=True, eq=False)
class DensityField:
    """A normalized density sampled on a grid at one time."""

    grid: GridSpec
    t: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("density has non-finite entries")
        v = np.maximum(v, 0.0)
        mass = float(np.sum(v * self.grid.trapezoid_weights()))
        if mass <= 0:
            raise ValueError("density has non-positive mass")
        object.__setattr__(self, "values", v / mass)

    @property
    def mass(self) -> float:
        return float(np.sum(self.values * self.grid.trapezoid_weights()))

    @property
    def floor(self) -> float:
        return DENSITY_FLOOR_RATIO * float(self.values.max())

    def bulk_mask(self, ratio: float = BULK_RATIO) -> np.ndarray:
        return self.values >= ratio * self.values.max()

    def mean(self) -> np.ndarray:
        w = (self.values * self.grid.trapezoid_weights()).ravel()
        pts = self.grid.points().reshape(-1, self.grid.dim)
        return np.einsum("n,ni->i", w, pts)

    def cov(self) -> np.ndarray:
        w = (self.values * self.grid.trapezoid_weights()).ravel()
        pts = self.grid.points().reshape(-1, self.grid.dim) - self.mean()
        return np.einsum("n,ni,nj->ij", w, pts, pts)


@dataclass(frozen=True, eq=False)
class DensityTimeSeries:
    """Density slices on a shared grid at strictly increasing times."""

    grid: GridSpec
    times: np.ndarray
    values: np.ndarray = field(repr=False)  # (K,) + grid.shape
    mass_drift: float = 0.0  # max |pre-renormalization mass - 1| over all steps

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("need at least two time slices")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if v.shape != (len(t),) + self.grid.shape:
            raise ValueError("values shape does not match (K,) + grid shape")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.times)

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(
                f"t={t} is not a stored slice (nearest is {self.times[k]})"
            )
        return k

    def at_time(self, t: float) -> DensityField:
        k = self.index_of(t)
        return DensityField(self.grid, float(self.times[k]), self.values[k])

    def slice(self, k: int) -> DensityField:
        return DensityField(self.grid, float(self.times[k]), self.values[k])

    def final(self) -> DensityField:
        return self.slice(len(self) - 1)


def score(density: DensityField):
    """Score field grad log p on the grid.

    Returns (score, valid): score has shape grid.shape + (d,); valid marks
    nodes where p is above the positivity floor. Central differences inside,
    second-order one-sided at the edges (exact for Gaussian log-densities).
    """
    g = density.grid
    p = density.values
    floor = max(density.floor, np.finfo(float).tiny)
    valid = p >= floor
    logp = np.log(np.maximum(p, floor))
    comps = np.gradient(logp, *[g.spacing[ax] for ax in range(g.dim)], edge_order=2)
    if g.dim == 1:
        comps = [comps]
    return np.stack(comps, axis=-1), valid


def gaussian_density(grid: GridSpec, mean, cov, t: float = 0.0) -> DensityField:
    """Exact (then grid-normalized) Gaussian density on the grid."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(grid.dim)
    pts = grid.points() - mean
    prec = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", pts, prec, pts)
    vals = np.exp(-0.5 * quad)
    return DensityField(grid, t, vals)


def stationary_density(drift: VectorField, sigma: float, grid: GridSpec, t: float = 0.0) -> DensityField:
    """Stationary density exp(2 U / sigma^2) for a gradient drift b = grad U.

    Raises if the drift carries no potential, sigma == 0, or the grid
    truncates too much mass (boundary layer holding >= 1e-3 of the total).
    """
    if sigma <= 0:
        raise ValueError("stationary density needs sigma > 0")
    if not drift.has_potential:
        raise ValueError(f"drift '{drift.name}' has no potential; no closed-form stationary law")
    U = drift.potential(grid.points())
    w = np.exp((2.0 / sigma**2) * (U - U.max()))
    dens = DensityField(grid, t, w)
    _check_boundary_mass(dens)
    return dens


def stationary_gaussian_linear(A, sigma: float, grid: GridSpec, t: float = 0.0) -> DensityField:
    """Stationary Gaussian N(0, S) of dX = A X dt + sigma dW, A Hurwitz.

    S solves A S + S A^T + sigma^2 I = 0 (continuous Lyapunov equation).
    """
    A = np.asarray(A, dtype=float)
    if sigma <= 0:
        raise ValueError("stationary density needs sigma > 0")
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise ValueError("A must be Hurwitz (all eigenvalues in the open left half-plane)")
    S = solve_continuous_lyapunov(A, -sigma**2 * np.eye(A.shape[0]))
    dens = gaussian_density(grid, np.zeros(A.shape[0]), S, t)
    _check_boundary_mass(dens)
    return dens


def _check_boundary_mass(dens: DensityField, limit: float = 1e-3) -> None:
    g = dens.grid
    w = dens.values * g.trapezoid_weights()
    shell = np.zeros(g.shape, dtype=bool)
    for ax in range(g.dim):
        sl = [slice(None)] * g.dim
        sl[ax] = 0
        shell[tuple(sl)] = True
        sl[ax] = -1
        shell[tuple(sl)] = True
    frac = float(w[shell].sum())
    if frac >= limit:
        raise ValueError(
            f"grid too small: boundary layer holds {frac:.2e} of the mass (limit {limit:.0e}); "
            "enlarge the box"
        )


def kde(samples: np.ndarray, grid: GridSpec, t: float = 0.0, bandwidth=None) -> DensityField:
    """Gaussian-product KDE of samples (N, d) on the grid, grid-normalized.

    bandwidth: scalar or per-axis array; Silverman's rule when omitted.
    Binned evaluation (linear binning + separable convolution).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != grid.dim:
        raise ValueError(f"samples have dim {samples.shape[1]}, grid has {grid.dim}")
    if bandwidth is None:
        bandwidth = _smooth.silverman_bandwidth(samples)
    bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.dim,))
    if np.any(bandwidth <= 0):
        raise ValueError("bandwidth must be positive")
    (counts,), kept = _smooth.linear_bin_multi(samples, [None], grid)
    if kept == 0:
        raise ValueError("no samples fall inside the grid")
    taps = [_smooth.gaussian_taps(bandwidth[ax], grid.spacing[ax]) for ax in range(grid.dim)]
    vals = _smooth.convolve_grid(counts, taps)
    return DensityField(grid, t, vals)


@dataclass(frozen=True)
class GridLaw:
    """Initial law given by a density field (sample: node weights + in-cell jitter)."""

    density: DensityField

    @property
    def dim(self) -> int:
        return self.density.grid.dim

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        g = self.density.grid
        w = (self.density.values * g.trapezoid_weights()).ravel()
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        coords = np.unravel_index(idx, g.shape)
        x = np.stack([g.axes[ax][coords[ax]] for ax in range(g.dim)], axis=-1)
        jitter = (rng.random((n, g.dim)) - 0.5) * g.spacing
        return np.clip(x + jitter, g.lower, g.upper)

    def mean(self) -> np.ndarray:
        return self.density.mean()

    def cov(self) -> np.ndarray:
        return self.density.cov()

    def describe(self) -> dict:
        return {"kind": "grid", "t": self.density.t, "grid": self.density.grid.describe()}


def _face_velocities(drift: VectorField, grid: GridSpec) -> list:
    """Drift component normal to each face, per axis, at face midpoints."""
    out = []
    for ax in range(grid.dim):
        axes = [a.copy() for a in grid.axes]
        axes[ax] = 0.5 * (axes[ax][1:] + axes[ax][:-1])  # face midpoints
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        out.append(drift(pts)[..., ax])
    return out


def fokker_planck_stable_steps(spec: DiffusionSpec, grid: GridSpec, safety: float = 0.9) -> int:
    """Smallest admissible step count for the explicit scheme on [0, T]."""
    b = spec.drift(grid.points())
    h = grid.spacing
    rate = np.zeros(grid.shape)
    for ax in range(grid.dim):
        rate += np.abs(b[..., ax]) / h[ax]
    rate += spec.sigma**2 * np.sum(1.0 / h**2)
    dt_max = safety / float(rate.max())
    return max(2, int(np.ceil(spec.horizon / dt_max)))


def fokker_planck_solve(
    spec: DiffusionSpec,
    init: DensityField,
    grid: Optional[GridSpec] = None,
    n_time_steps: int = 0,
    n_slices: int = 65,
) -> DensityTimeSeries:
    """Evolve the density of dX = b(X) dt + sigma dW on [0, horizon].

    Explicit conservative scheme: first-order upwind advection with face
    velocities, centered diffusion with no-flux (reflecting) boundaries.
    Each step clips negatives and renormalizes; the largest pre-renormalization
    mass deviation is reported on the returned series.

    Refuses a step count violating the CFL bound (CFLError carries the
    smallest admissible count).
    """
    if grid is None:
        grid = init.grid
    elif grid is not init.grid and grid.describe() != init.grid.describe():
        raise ValueError("init density must live on the solver grid")
    if spec.sigma <= 0:
        raise ValueError("fokker_planck_solve needs sigma > 0")
    if spec.drift.dim != grid.dim:
        raise ValueError("drift dimension does not match the grid")

    needed = fokker_planck_stable_steps(spec, grid)
    if n_time_steps < needed:
        raise CFLError(
            f"{n_time_steps} steps violate the explicit stability bound on this grid; "
            f"use at least {needed}",
            suggested_steps=needed,
        )

    T = spec.horizon
    dt = T / n_time_steps
    h = grid.spacing
    D = 0.5 * spec.sigma**2
    faces = _face_velocities(spec.drift, grid)
    faces_pos = [np.maximum(f, 0.0) for f in faces]
    faces_neg = [np.minimum(f, 0.0) for f in faces]
    w = grid.trapezoid_weights()

    n_slices = int(min(max(n_slices, 2), n_time_steps + 1))
    record_at = np.unique(np.round(np.linspace(0, n_time_steps, n_slices)).astype(int))
    times = record_at * dt
    out = np.empty((len(record_at),) + grid.shape)
    rec = {int(k): i for i, k in enumerate(record_at)}

    p = init.values.copy()
    mass_drift = 0.0
    if 0 in rec:
        out[rec[0]] = p
    for k in range(1, n_time_steps + 1):
        dp = np.zeros_like(p)
        for ax in range(grid.dim):
            sl_lo = [slice(None)] * grid.dim
            sl_hi = [slice(None)] * grid.dim
            sl_lo[ax] = slice(0, -1)
            sl_hi[ax] = slice(1, None)
            sl_lo, sl_hi = tuple(sl_lo), tuple(sl_hi)
            # upwind advective flux through interior faces (boundary flux = 0)
            flux = faces_pos[ax] * p[sl_lo] + faces_neg[ax] * p[sl_hi]
            # diffusive flux -D dp/dx through the same faces
            flux = flux - D * (p[sl_hi] - p[sl_lo]) / h[ax]
            dp[sl_lo] -= flux / h[ax]
            dp[sl_hi] += flux / h[ax]
        p = p + dt * dp
        np.maximum(p, 0.0, out=p)
        mass = float(np.sum(p * w))
        mass_drift = max(mass_drift, abs(mass - 1.0))
        if mass <= 0:
            raise RuntimeError("density mass collapsed to zero (scheme unstable?)")
        p /= mass
        if k in rec:
            out[rec[k]] = p
    return DensityTimeSeries(grid, times, out, mass_drift=mass_drift)


def interp_field(grid: GridSpec, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of node values at arbitrary points.

    values : grid.shape + trailing component axes (or none).
    points : (n, d). Points outside the grid raise ValueError.
    Nodes holding NaN poison any interpolated value that touches them.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        raise ValueError("points dimension does not match the grid")
    u = (pts - grid.lower) / grid.spacing
    nn = np.asarray(grid.nodes)
    eps = 1e-9
    if np.any(u < -eps) or np.any(u > nn - 1 + eps):
        raise ValueError("interpolation query outside the grid")
    u = np.clip(u, 0.0, nn - 1)
    i0 = np.minimum(u.astype(np.int64), nn - 2)
    f = u - i0
    trailing = values.shape[grid.dim:]
    out = np.zeros((pts.shape[0],) + trailing)
    for corner in range(2**grid.dim):
        shift = [(corner >> ax) & 1 for ax in range(grid.dim)]
        w = np.ones(pts.shape[0])
        for ax in range(grid.dim):
            w = w * (f[:, ax] if shift[ax] else 1.0 - f[:, ax])
        vals = values[tuple((i0 + shift).T)]
        out += w.reshape((-1,) + (1,) * len(trailing)) * vals
    return out
