"""Binned Gaussian smoothing shared by the KDE and the kernel regressions.

Samples are scattered onto the evaluation grid with linear (cloud-in-cell)
binning, then convolved with a truncated Gaussian per axis. This turns an
O(M * nodes) Nadaraya-Watson pass into O(M + nodes * taps), which is what
makes time-pooled ensembles (tens of millions of samples) tractable.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

TRUNCATE = 8.0  # kernel support in bandwidths


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-axis rule-of-thumb bandwidth 0.9 * min(sd, IQR/1.34) * M^(-1/5)."""
    samples = np.atleast_2d(samples)
    m = samples.shape[0]
    sd = samples.std(axis=0, ddof=1)
    q75, q25 = np.percentile(samples, [75.0, 25.0], axis=0)
    iqr = q75 - q25
    spread = np.where(iqr > 0, np.minimum(sd, iqr / 1.34), sd)
    if np.any(spread <= 0):
        raise ValueError("degenerate sample spread; supply a bandwidth explicitly")
    return 0.9 * spread * m ** (-0.2)


def linear_bin_multi(points: np.ndarray, weights: list, grid) -> tuple:
    """Scatter samples onto grid nodes with linear weights.

    points : (M, d) sample locations; samples outside the grid are dropped.
    weights : list of (M,) arrays (or None for unit weights), all binned with
        the same geometry in one pass.
    Returns (list of arrays of grid.shape, n_kept).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = grid.dim
    lower = grid.lower
    spacing = grid.spacing
    nodes = np.asarray(grid.nodes)

    u = (pts - lower) / spacing  # fractional node coordinates
    inside = np.all((u >= 0.0) & (u <= nodes - 1), axis=1)
    u = u[inside]
    n_kept = u.shape[0]
    kept_weights = [None if w is None else np.asarray(w, dtype=float)[inside] for w in weights]

    i0 = np.minimum(u.astype(np.int64), np.asarray(nodes) - 2)
    f = u - i0  # in [0, 1]

    size = int(np.prod(nodes))
    outs = [np.zeros(size) for _ in weights]
    # accumulate the 2^d corner contributions
    for corner in range(2**d):
        shift = np.array([(corner >> ax) & 1 for ax in range(d)])
        w_geom = np.ones(n_kept)
        for ax in range(d):
            w_geom *= f[:, ax] if shift[ax] else (1.0 - f[:, ax])
        idx = np.ravel_multi_index(tuple((i0 + shift).T), tuple(nodes))
        for out, w in zip(outs, kept_weights):
            ww = w_geom if w is None else w_geom * w
            out += np.bincount(idx, weights=ww, minlength=size)
    shape = tuple(nodes)
    return [out.reshape(shape) for out in outs], n_kept


def gaussian_taps(bandwidth: float, spacing: float, truncate: float = TRUNCATE) -> np.ndarray:
    """Unnormalized Gaussian filter taps on the grid spacing."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    half = max(1, int(np.ceil(truncate * bandwidth / spacing)))
    k = np.arange(-half, half + 1)
    return np.exp(-0.5 * (k * spacing / bandwidth) ** 2)


def convolve_grid(arr: np.ndarray, taps_per_axis: list) -> np.ndarray:
    out = arr
    for ax, taps in enumerate(taps_per_axis):
        out = convolve1d(out, taps, axis=ax, mode="constant", cval=0.0)
    return out


class BinnedAccumulator:
    """Streaming accumulator for binned kernel regression.

    Feed (points, values) batches; finalize() convolves once and returns the
    regression mean, the Kish effective sample size, and a plug-in standard
    error per node and value component. Pooled batches are treated as
    independent draws for the SE, which overstates precision slightly for
    strongly dependent pooling; calibration happens in the tests.
    """

    def __init__(self, grid, n_components: int):
        self.grid = grid
        self.m = n_components
        shape = grid.shape
        self.W = np.zeros(shape)
        self.Q = np.zeros(shape + (n_components,))
        self.S = np.zeros(shape + (n_components,))
        self.n_seen = 0
        self.n_kept = 0

    def add(self, points: np.ndarray, values: np.ndarray) -> None:
        values = np.atleast_2d(values)
        weights = [None] + [values[:, j] for j in range(self.m)] + [
            values[:, j] ** 2 for j in range(self.m)
        ]
        outs, kept = linear_bin_multi(points, weights, self.grid)
        self.W += outs[0]
        for j in range(self.m):
            self.Q[..., j] += outs[1 + j]
            self.S[..., j] += outs[1 + self.m + j]
        self.n_seen += points.shape[0]
        self.n_kept += kept

    def finalize(self, bandwidth: np.ndarray, min_ess: float = 50.0):
        """Returns (values, ess, stderr, valid) arrays on the grid."""
        bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float), (self.grid.dim,))
        taps = [gaussian_taps(bandwidth[ax], self.grid.spacing[ax]) for ax in range(self.grid.dim)]
        taps_sq = [t**2 for t in taps]
        Wc = convolve_grid(self.W, taps)
        W2c = convolve_grid(self.W, taps_sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            ess = np.where(W2c > 0, Wc**2 / W2c, 0.0)
            vals = np.empty(self.grid.shape + (self.m,))
            se = np.empty_like(vals)
            for j in range(self.m):
                Qc = convolve_grid(self.Q[..., j], taps)
                Sc = convolve_grid(self.S[..., j], taps)
                v = np.where(Wc > 0, Qc / np.maximum(Wc, 1e-300), 0.0)
                var = np.maximum(np.where(Wc > 0, Sc / np.maximum(Wc, 1e-300), 0.0) - v**2, 0.0)
                vals[..., j] = v
                se[..., j] = np.sqrt(var / np.maximum(ess, 1.0))
        valid = ess >= min_ess
        vals[~valid] = 0.0
        return vals, ess, se, valid
