"""Forward and backward stochastic derivatives on grids and from ensembles.

For dX = b(X) dt + sigma dW with marginal density p_t:

    D+ X = b(x)
    D- X = b(x) - sigma^2 grad log p_t(x)
    D+^2 X = (db) b + (sigma^2/2) Lap b
    D-^2 X = d_t g + (dg) g - (sigma^2/2) Lap g,   g := b - sigma^2 grad log p_t

The complex derivative is D = (D+ + D-)/2 + i (D+ - D-)/2; its square has
real part (D+D- + D-D+)/2 and imaginary part (D+^2 - D-^2)/2, with the cross
terms computed by applying the forward generator to the backward drift and
vice versa.

Empirical estimators regress difference quotients (X_{t+h} - X_t)/h (forward)
or (X_t - X_{t-h})/h (backward) on X_t with a Gaussian product kernel,
evaluated by linear binning + separable convolution. Stationary ensembles may
pool quotients over all disjoint length-h windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _smooth
from .density import DensityField, DensityTimeSeries, GridSpec, score
from .model import DiffusionSpec
from .simulate import PathEnsemble

__all__ = [
    "DerivativeField",
    "TestFunction",
    "identity_function",
    "analytic_forward",
    "analytic_backward",
    "analytic_second_order",
    "empirical_derivative",
    "empirical_second_order",
    "compose",
    "complex_derivative",
    "mean_acceleration",
]

DEFAULT_MIN_ESS = 50.0
_BATCH_POINTS = 4_000_000


@dataclass(frozen=True, eq=False)
class DerivativeField:
    """A (possibly complex) derivative field sampled on a grid.

    values : grid.shape + (m,) real part
    imag   : optional imaginary part, same shape
    mask   : grid.shape bool, nodes where the field is trustworthy
    ess / stderr : empirical-estimator diagnostics (None for analytic fields)
    """

    grid: GridSpec
    t: float
    kind: str
    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False, default=None)
    imag: Optional[np.ndarray] = field(repr=False, default=None)
    ess: Optional[np.ndarray] = field(repr=False, default=None)
    stderr: Optional[np.ndarray] = field(repr=False, default=None)
    bandwidth: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == len(self.grid.shape):
            v = v[..., None]
        if v.shape[: len(self.grid.shape)] != self.grid.shape:
            raise ValueError("values do not live on the grid")
        object.__setattr__(self, "values", v)
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(self.grid.shape, dtype=bool))

    @property
    def n_components(self) -> int:
        return self.values.shape[-1]

    def sup_norm(self, extra_mask=None) -> float:
        """Max |component| over this field's mask (and an optional extra mask)."""
        m = self.mask if extra_mask is None else (self.mask & extra_mask)
        if not np.any(m):
            return float("nan")
        mag = np.abs(self.values)
        if self.imag is not None:
            mag = np.maximum(mag, np.abs(self.imag))
        return float(mag[m].max())

    def coverage(self, reference_mask) -> float:
        ref = int(np.sum(reference_mask))
        return float(np.sum(self.mask & reference_mask)) / ref if ref else 0.0


def _interior_mask(grid: GridSpec, margin: int) -> np.ndarray:
    m = np.zeros(grid.shape, dtype=bool)
    sl = tuple(slice(margin, n - margin) for n in grid.shape)
    m[sl] = True
    return m


def _grid_jacobian(grid: GridSpec, vec: np.ndarray) -> np.ndarray:
    """J[..., i, j] = d v_i / d x_j by central differences on the grid."""
    d = grid.dim
    J = np.empty(grid.shape + (vec.shape[-1], d))
    for i in range(vec.shape[-1]):
        comps = np.gradient(vec[..., i], *[grid.spacing[ax] for ax in range(d)], edge_order=2)
        if d == 1:
            comps = [comps]
        for j in range(d):
            J[..., i, j] = comps[j]
    return J


def _grid_laplacian(grid: GridSpec, vec: np.ndarray) -> np.ndarray:
    """Componentwise Laplacian by direct 3-point second differences.

    Edge planes reuse the adjacent interior value; callers mask a margin."""
    out = np.zeros_like(vec)
    d = grid.dim
    for ax in range(d):
        h2 = grid.spacing[ax] ** 2
        dd = np.empty_like(vec)
        sl_m = [slice(None)] * d
        sl_0 = [slice(None)] * d
        sl_p = [slice(None)] * d
        sl_m[ax], sl_0[ax], sl_p[ax] = slice(0, -2), slice(1, -1), slice(2, None)
        dd[tuple(sl_0)] = (vec[tuple(sl_p)] - 2.0 * vec[tuple(sl_0)] + vec[tuple(sl_m)]) / h2
        lo = [slice(None)] * d
        lo[ax] = 0
        lo_n = [slice(None)] * d
        lo_n[ax] = 1
        dd[tuple(lo)] = dd[tuple(lo_n)]
        hi = [slice(None)] * d
        hi[ax] = -1
        hi_n = [slice(None)] * d
        hi_n[ax] = -2
        dd[tuple(hi)] = dd[tuple(hi_n)]
        out += dd
    return out


def analytic_forward(
    spec: DiffusionSpec, grid: GridSpec, density: Optional[DensityField] = None, t: float = 0.0
) -> DerivativeField:
    """D+ X = b on the grid; masked to the density bulk when one is given."""
    vals = spec.drift(grid.points())
    mask = None
    if density is not None:
        mask = density.bulk_mask()
        t = density.t
    return DerivativeField(grid, t, "forward", vals, mask=mask)


def analytic_backward(spec: DiffusionSpec, density: DensityField) -> DerivativeField:
    """D- X = b - sigma^2 grad log p on the density's grid and bulk."""
    if spec.sigma <= 0:
        raise ValueError("backward derivative needs sigma > 0")
    g = density.grid
    s, valid = score(density)
    vals = spec.drift(g.points()) - spec.sigma**2 * s
    mask = density.bulk_mask() & valid
    return DerivativeField(g, density.t, "backward", vals, mask=mask)


def _score_time_derivative(series: DensityTimeSeries, t: float) -> np.ndarray:
    """d_t grad log p at the interior slice nearest t, by centered slice differences."""
    k = series.index_of(t)
    if k == 0 or k == len(series) - 1:
        raise ValueError("time derivative needs an interior slice of the density series")
    s_prev, _ = score(series.slice(k - 1))
    s_next, _ = score(series.slice(k + 1))
    return (s_next - s_prev) / (series.times[k + 1] - series.times[k - 1])


def _second_order_pieces(spec: DiffusionSpec, density: DensityField):
    g = density.grid
    pts = g.points()
    b = spec.drift(pts)
    Jb = spec.drift.jacobian(pts)
    Lb = spec.drift.laplacian(pts)
    s, valid = score(density)
    Js = _grid_jacobian(g, s)
    Ls = _grid_laplacian(g, s)
    sig2 = spec.sigma**2
    gdrift = b - sig2 * s
    Jg = Jb - sig2 * Js
    Lg = Lb - sig2 * Ls
    mask = density.bulk_mask() & valid & _interior_mask(g, 2)
    return b, Jb, Lb, s, gdrift, Jg, Lg, mask


def analytic_second_order(
    spec: DiffusionSpec,
    density: DensityField,
    series: Optional[DensityTimeSeries] = None,
):
    """(D+^2 X, D-^2 X) on the density's grid.

    D+^2 = (db) b + (sigma^2/2) Lap b
    D-^2 = d_t g + (dg) g - (sigma^2/2) Lap g

    The d_t g term is -sigma^2 d_t grad log p, computed from neighbor slices
    when a series is supplied; omit the series only for stationary densities.
    """
    if spec.sigma <= 0:
        raise ValueError("second-order derivatives need sigma > 0")
    g = density.grid
    b, Jb, Lb, s, gd, Jg, Lg, mask = _second_order_pieces(spec, density)
    sig2 = spec.sigma**2
    dplus2 = np.einsum("...ij,...j->...i", Jb, b) + 0.5 * sig2 * Lb
    dminus2 = np.einsum("...ij,...j->...i", Jg, gd) - 0.5 * sig2 * Lg
    if series is not None:
        dminus2 = dminus2 - sig2 * _score_time_derivative(series, density.t)
    t = density.t
    return (
        DerivativeField(g, t, "forward2", dplus2, mask=mask),
        DerivativeField(g, t, "backward2", dminus2, mask=mask),
    )


@dataclass(frozen=True)
class TestFunction:
    """A smooth test function f : R^d -> R^m with exact derivatives.

    jacobian_fn : (..., d) -> (..., m, d)
    laplacian_fn : (..., d) -> (..., m) componentwise Laplacian
    dt_fn : optional explicit time derivative (time-homogeneous f: None)
    """

    dim: int
    n_components: int
    value_fn: callable
    jacobian_fn: callable
    laplacian_fn: callable
    dt_fn: Optional[callable] = None
    name: str = "f"


def identity_function(dim: int) -> TestFunction:
    eye = np.eye(dim)
    return TestFunction(
        dim=dim,
        n_components=dim,
        value_fn=lambda x: x,
        jacobian_fn=lambda x: np.broadcast_to(eye, x.shape + (dim,)).copy(),
        laplacian_fn=lambda x: np.zeros_like(x),
        name="identity",
    )


def compose(
    f: TestFunction,
    spec: DiffusionSpec,
    direction: str,
    grid: Optional[GridSpec] = None,
    density: Optional[DensityField] = None,
    t: float = 0.0,
) -> DerivativeField:
    """D+- f(X) = (df) D+- X  +-  (sigma^2/2) Lap f  (+ d_t f), on the grid.

    direction "forward" uses D+ and +; "backward" uses D- and - (and needs a
    density). With f = identity this reproduces the first-order fields
    exactly (the chain-rule terms are an identity matrix product and a zero
    Laplacian).
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    if direction == "backward":
        if density is None:
            raise ValueError("backward composition needs a density")
        base = analytic_backward(spec, density)
        sign = -1.0
    else:
        if grid is None:
            if density is None:
                raise ValueError("forward composition needs a grid or a density")
            grid = density.grid
        base = analytic_forward(spec, grid, density=density, t=t)
        sign = 1.0
    g = base.grid
    pts = g.points()
    if f.dim != g.dim:
        raise ValueError("test function dimension does not match the grid")
    Jf = np.asarray(f.jacobian_fn(pts), dtype=float)
    Lf = np.asarray(f.laplacian_fn(pts), dtype=float)
    vals = np.einsum("...ij,...j->...i", Jf, base.values) + sign * 0.5 * spec.sigma**2 * Lf
    if f.dt_fn is not None:
        vals = vals + np.asarray(f.dt_fn(pts), dtype=float)
    return DerivativeField(
        g, base.t, f"compose_{direction}", vals, mask=base.mask,
        meta={"f": f.name},
    )


def complex_derivative(
    spec: DiffusionSpec,
    density: DensityField,
    order: int = 1,
    series: Optional[DensityTimeSeries] = None,
) -> DerivativeField:
    """The complex derivative D (order 1) or its square D^2 (order 2).

    order 1: Re = (D+ + D-)/2 = b - (sigma^2/2) grad log p
             Im = (D+ - D-)/2 = (sigma^2/2) grad log p
    order 2: Re = (D+D- + D-D+)/2, Im = (D+^2 - D-^2)/2, where
             D+D- X = (dg) b + (sigma^2/2) Lap g   (forward derivative of g)
             D-D+ X = (db) g - (sigma^2/2) Lap b   (backward derivative of b)

    The order-2 meta dict carries both cross terms; the real part is
    symmetric under swapping them.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if spec.sigma <= 0:
        raise ValueError("complex derivative needs sigma > 0")
    g = density.grid
    if order == 1:
        fwd = analytic_forward(spec, g, density=density)
        bwd = analytic_backward(spec, density)
        re = 0.5 * (fwd.values + bwd.values)
        im = 0.5 * (fwd.values - bwd.values)
        return DerivativeField(g, density.t, "complex", re, mask=fwd.mask & bwd.mask, imag=im)
    b, Jb, Lb, s, gd, Jg, Lg, mask = _second_order_pieces(spec, density)
    sig2 = spec.sigma**2
    fwd2, bwd2 = analytic_second_order(spec, density, series=series)
    cross_fb = np.einsum("...ij,...j->...i", Jg, b) + 0.5 * sig2 * Lg   # D+ D- X
    cross_bf = np.einsum("...ij,...j->...i", Jb, gd) - 0.5 * sig2 * Lb  # D- D+ X
    re = 0.5 * (cross_fb + cross_bf)
    im = 0.5 * (fwd2.values - bwd2.values)
    return DerivativeField(
        g, density.t, "complex2", re, mask=mask & fwd2.mask, imag=im,
        meta={"cross_fb": cross_fb, "cross_bf": cross_bf},
    )


def mean_acceleration(
    spec: DiffusionSpec, density: DensityField, series: Optional[DensityTimeSeries] = None
) -> DerivativeField:
    """Re D^2 X = (D+D- + D-D+)/2 X, the mean acceleration field."""
    d2 = complex_derivative(spec, density, order=2, series=series)
    return DerivativeField(
        d2.grid, d2.t, "mean_acceleration", d2.values, mask=d2.mask, meta=d2.meta
    )


# --- empirical estimators ----------------------------------------------------


def _lag_steps(ensemble: PathEnsemble, h_lag: float) -> int:
    k = int(round(h_lag / ensemble.dt))
    if k < 1 or abs(k * ensemble.dt - h_lag) > 1e-9 * max(1.0, h_lag):
        raise ValueError(f"h_lag={h_lag} is not a positive multiple of dt={ensemble.dt}")
    return k


def _window_starts(ensemble: PathEnsemble, t_index: int, k: int, direction: str, pool: bool):
    n = ensemble.n_steps
    if direction == "forward":
        if pool:
            return np.arange(0, n - k + 1, k)
        if t_index + k > n:
            raise ValueError("forward quotient at t needs t + h_lag <= horizon")
        return np.array([t_index])
    if pool:
        return np.arange(k, n + 1, k)
    if t_index - k < 0:
        raise ValueError("backward quotient at t needs t - h_lag >= 0")
    return np.array([t_index])


def _quotient_batches(ensemble: PathEnsemble, starts, k: int, direction: str, h: float):
    """Yield (conditioning points, difference quotients) over path/window batches."""
    states = ensemble.states
    n_paths = ensemble.n_paths
    per = max(1, int(_BATCH_POINTS // max(n_paths, 1)))
    for lo in range(0, len(starts), per):
        chunk = starts[lo : lo + per]
        if direction == "forward":
            x = states[:, chunk, :]
            q = (states[:, chunk + k, :] - x) / h
        else:
            x = states[:, chunk, :]
            q = (x - states[:, chunk - k, :]) / h
        d = states.shape[2]
        yield x.reshape(-1, d), q.reshape(-1, d)


def empirical_derivative(
    ensemble: PathEnsemble,
    t: float,
    h_lag: float,
    direction: str,
    grid: GridSpec,
    bandwidth=None,
    pool: bool = False,
    min_ess: float = DEFAULT_MIN_ESS,
) -> DerivativeField:
    """Kernel regression estimate of D+ or D- on the grid.

    Regresses (X_{t+h} - X_t)/h (forward) or (X_t - X_{t-h})/h (backward) on
    X_t. With pool=True (stationary ensembles only) the quotients of all
    disjoint length-h windows in [0, T] are pooled; t is then ignored for
    sample selection and only stamps the output.

    Nodes are masked invalid when the Kish effective sample size falls below
    min_ess. The stderr diagnostic is the plug-in standard error treating
    pooled samples as independent.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    if grid.dim != ensemble.dim:
        raise ValueError("grid dimension does not match the ensemble")
    k = _lag_steps(ensemble, h_lag)
    h = k * ensemble.dt
    t_index = ensemble.step_index(t)
    starts = _window_starts(ensemble, t_index, k, direction, pool)
    if bandwidth is None:
        bandwidth = _smooth.silverman_bandwidth(ensemble.states[:, t_index, :])
    bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.dim,)).copy()
    acc = _smooth.BinnedAccumulator(grid, ensemble.dim)
    for x, q in _quotient_batches(ensemble, starts, k, direction, h):
        acc.add(x, q)
    vals, ess, se, valid = acc.finalize(bandwidth, min_ess=min_ess)
    return DerivativeField(
        grid, t, f"empirical_{direction}", vals, mask=valid, ess=ess, stderr=se,
        bandwidth=bandwidth,
        meta={
            "h_lag": h, "pool": bool(pool), "direction": direction,
            "n_samples": int(acc.n_seen), "n_in_grid": int(acc.n_kept),
            "min_ess": float(min_ess),
        },
    )


def _interp_or_nan(grid: GridSpec, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation; rows outside the grid come back NaN."""
    from .density import interp_field

    u = (pts - grid.lower) / grid.spacing
    nn = np.asarray(grid.nodes)
    inside = np.all((u >= 0.0) & (u <= nn - 1), axis=1)
    out = np.full((pts.shape[0],) + values.shape[grid.dim:], np.nan)
    if np.any(inside):
        out[inside] = interp_field(grid, values, pts[inside])
    return out


def empirical_second_order(
    ensemble: PathEnsemble,
    t: float,
    h_lag: float,
    direction: str,
    grid: GridSpec,
    bandwidth=None,
    pool: bool = False,
    min_ess: float = DEFAULT_MIN_ESS,
    first_stage: Optional[DerivativeField] = None,
) -> DerivativeField:
    """Two-stage estimate of D+^2 (direction "forward") or D-^2 ("backward").

    Stage one estimates the first-order field v = D+- X; stage two regresses
    the difference quotients of v(X_t) along paths on X_t. Samples that leave
    the grid or touch invalid stage-one nodes are dropped.
    """
    if first_stage is None:
        first_stage = empirical_derivative(
            ensemble, t, h_lag, direction, grid, bandwidth=bandwidth, pool=pool, min_ess=min_ess
        )
    v = first_stage.values.copy()
    v[~first_stage.mask] = np.nan
    k = _lag_steps(ensemble, h_lag)
    h = k * ensemble.dt
    t_index = ensemble.step_index(t)
    starts = _window_starts(ensemble, t_index, k, direction, pool)
    bw = first_stage.bandwidth
    if bw is None:
        bw = _smooth.silverman_bandwidth(ensemble.states[:, t_index, :])
    acc = _smooth.BinnedAccumulator(grid, ensemble.dim)
    states = ensemble.states
    per = max(1, int(_BATCH_POINTS // max(ensemble.n_paths, 1)))
    for lo in range(0, len(starts), per):
        chunk = starts[lo : lo + per]
        if direction == "forward":
            x = states[:, chunk, :].reshape(-1, ensemble.dim)
            x_end = states[:, chunk + k, :].reshape(-1, ensemble.dim)
            q = (_interp_or_nan(grid, v, x_end) - _interp_or_nan(grid, v, x)) / h
        else:
            x = states[:, chunk, :].reshape(-1, ensemble.dim)
            x_prev = states[:, chunk - k, :].reshape(-1, ensemble.dim)
            q = (_interp_or_nan(grid, v, x) - _interp_or_nan(grid, v, x_prev)) / h
        keep = np.all(np.isfinite(q), axis=1)
        acc.add(x[keep], q[keep])
    vals, ess, se, valid = acc.finalize(np.asarray(bw), min_ess=min_ess)
    return DerivativeField(
        grid, t, f"empirical_{direction}2", vals, mask=valid & first_stage.mask,
        ess=ess, stderr=se, bandwidth=np.asarray(bw),
        meta={"h_lag": h, "pool": bool(pool), "direction": direction},
    )
