"""Euler-Maruyama path ensembles, time reversal, and drift perturbations.

Reproducibility contract: the driving noise is generated by the Philox
counter-based generator keyed (seed, chunk_index), with paths partitioned
into fixed chunks of 8192. The increments for path block [8192*c, 8192*(c+1))
depend only on (seed, c, n_steps, dim), so ensembles are bit-reproducible
across runs and machines for any n_paths, and a stored ensemble's noise can
be regenerated from its header alone. Initial conditions draw from a
dedicated stream keyed (seed, 2^63 + 11).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .density import DensityTimeSeries, GridLaw, interp_field, score
from .model import BlowUpError, DiffusionSpec, VectorField

__all__ = [
    "PathEnsemble",
    "ReversedDriftField",
    "euler_maruyama",
    "reverse_paths",
    "reversed_drift",
    "simulate_reversed",
    "perturbed_ensemble",
    "ensemble_to_binary",
    "ensemble_from_binary",
]

CHUNK = 8192
_INIT_STREAM = 2**63 + 11
BLOWUP_LIMIT = 1e6
_MAGIC = b"NLB1"
_VERSION = 1


def _noise_generator(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, chunk_index]))


def _init_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, _INIT_STREAM]))


def draw_noise(seed: int, n_paths: int, n_steps: int, dim: int, dt: float) -> np.ndarray:
    """Brownian increments (n_paths, n_steps, dim), chunk-keyed Philox."""
    out = np.empty((n_paths, n_steps, dim))
    root = np.sqrt(dt)
    for c in range(0, n_paths, CHUNK):
        hi = min(c + CHUNK, n_paths)
        rng = _noise_generator(seed, c // CHUNK)
        out[c:hi] = rng.standard_normal((hi - c, n_steps, dim))
    out *= root
    return out


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A bundle of discrete paths with their driving increments.

    states : (n_paths, n_steps + 1, dim), X at t_k = k * dt
    noise  : (n_paths, n_steps, dim) Brownian increments, or None when the
        ensemble was loaded without them.
    kind   : "forward", "reversed", or "perturbed"
    """

    spec: Optional[DiffusionSpec]
    states: np.ndarray = field(repr=False)
    noise: Optional[np.ndarray] = field(repr=False, default=None)
    dt: float = 0.0
    seed: int = 0
    kind: str = "forward"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.states)
        if s.ndim != 3:
            raise ValueError("states must have shape (n_paths, n_steps + 1, dim)")
        if self.kind not in ("forward", "reversed", "perturbed"):
            raise ValueError(f"unknown ensemble kind '{self.kind}'")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.noise is not None:
            n = np.asarray(self.noise)
            if n.shape != (s.shape[0], s.shape[1] - 1, s.shape[2]):
                raise ValueError("noise shape must be (n_paths, n_steps, dim)")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def step_index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)) + 1e-12:
            raise ValueError(f"t={t} is not on the time grid (dt={self.dt}, T={self.horizon})")
        return k

    def marginal(self, t: float) -> np.ndarray:
        """States at the grid time nearest-equal to t, shape (n_paths, dim)."""
        return self.states[:, self.step_index(t), :]

    def describe(self) -> dict:
        d = {
            "kind": self.kind,
            "n_paths": int(self.n_paths),
            "n_steps": int(self.n_steps),
            "dim": int(self.dim),
            "dt": float(self.dt),
            "seed": int(self.seed),
            "has_noise": self.noise is not None,
        }
        if self.spec is not None:
            d["spec"] = self.spec.descriptor()
        if self.meta:
            d["meta"] = {k: (float(v) if isinstance(v, (int, float)) else v) for k, v in self.meta.items()}
        return d


def _integrate(
    x0: np.ndarray,
    drift_of: Callable[[float, np.ndarray], np.ndarray],
    sigma: float,
    dt: float,
    noise: np.ndarray,
) -> np.ndarray:
    n_paths, n_steps, dim = noise.shape
    states = np.empty((n_paths, n_steps + 1, dim))
    states[:, 0, :] = x0
    x = x0.copy()
    for k in range(n_steps):
        x = x + drift_of(k * dt, x) * dt
        if sigma != 0.0:
            x += sigma * noise[:, k, :]
        if not np.all(np.isfinite(x)) or np.abs(x).max() > BLOWUP_LIMIT:
            bad = int(np.sum(~np.all(np.isfinite(x) & (np.abs(x) <= BLOWUP_LIMIT), axis=1)))
            raise BlowUpError(
                f"{bad} path(s) left |x| <= {BLOWUP_LIMIT:.0e} at step {k + 1} "
                f"(t = {(k + 1) * dt:.6g}); reduce dt or tame the drift",
                step=k + 1,
            )
        states[:, k + 1, :] = x
    return states


def euler_maruyama(spec: DiffusionSpec, n_paths: int, n_steps: int, seed: int) -> PathEnsemble:
    """Simulate n_paths Euler-Maruyama trajectories on [0, horizon].

    X_{k+1} = X_k + b(X_k) dt + sigma dW_k, dt = horizon / n_steps. The
    increments dW are stored on the ensemble. sigma = 0 degenerates to the
    deterministic Euler flow (increments are still drawn and stored, so the
    noise stream does not depend on sigma). Trajectories exceeding |x| > 1e6
    or going non-finite raise BlowUpError with the offending step.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("need n_paths >= 1 and n_steps >= 1")
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    dt = spec.horizon / n_steps
    x0 = spec.initial_law.sample(_init_generator(seed), n_paths)
    x0 = np.asarray(x0, dtype=float).reshape(n_paths, spec.dim)
    noise = draw_noise(seed, n_paths, n_steps, spec.dim, dt)
    drift = spec.drift
    states = _integrate(x0, lambda t, x: drift(x), spec.sigma, dt, noise)
    return PathEnsemble(spec=spec, states=states, noise=noise, dt=dt, seed=seed, kind="forward")


def reverse_paths(ensemble: PathEnsemble) -> PathEnsemble:
    """Reverse the time axis of each path: Y_k = X_{n - k}.

    The stored increments become the raw increments of the reversed states
    (Y_{k+1} - Y_k = X_{n-k-1} - X_{n-k}); they are path differences, not
    Brownian increments of the reversed dynamics. Reversing twice restores
    the states bit-for-bit; the increments of a twice-reversed forward
    ensemble are the state differences, not the original Brownian draws.
    """
    states = ensemble.states[:, ::-1, :].copy()
    noise = np.diff(states, axis=1)
    kind = "forward" if ensemble.kind == "reversed" else "reversed"
    meta = dict(ensemble.meta)
    meta["method"] = "path_reversal"
    return replace(ensemble, states=states, noise=noise, kind=kind, meta=meta)


class ReversedDriftField:
    """Drift of the time-reversed diffusion, b~(s, x) = -b(T-s, x) + sigma^2 grad log p_{T-s}(x).

    Built from a density time series covering [0, T]. Evaluation interpolates
    the score linearly in time between slices and multilinearly in space;
    queries outside the grid, or touching nodes where the density sits below
    its positivity floor, raise ValueError.
    """

    def __init__(self, spec: DiffusionSpec, series: DensityTimeSeries):
        if spec.sigma <= 0:
            raise ValueError("time reversal needs sigma > 0 (deterministic flows have no density)")
        if spec.drift.dim != series.grid.dim:
            raise ValueError("series grid dimension does not match the drift")
        if abs(series.times[-1] - spec.horizon) > 1e-9 * max(1.0, spec.horizon):
            raise ValueError("density series must cover [0, horizon]")
        self.spec = spec
        self.series = series
        self.horizon = float(series.times[-1])
        scores = []
        for k in range(len(series)):
            s, valid = score(series.slice(k))
            s = s.copy()
            s[~valid] = np.nan  # poison floored nodes; interpolation propagates it
            scores.append(s)
        self._scores = np.stack(scores, axis=0)

    def score_at(self, t: float, x: np.ndarray) -> np.ndarray:
        times = self.series.times
        t = min(max(t, times[0]), times[-1])
        k1 = int(np.searchsorted(times, t, side="left"))
        k1 = min(max(k1, 0), len(times) - 1)
        k0 = max(k1 - 1, 0)
        if k1 == k0:
            blend = interp_field(self.series.grid, self._scores[k0], x)
        else:
            w = (t - times[k0]) / (times[k1] - times[k0])
            s0 = interp_field(self.series.grid, self._scores[k0], x)
            s1 = interp_field(self.series.grid, self._scores[k1], x)
            blend = (1.0 - w) * s0 + w * s1
        if not np.all(np.isfinite(blend)):
            n_bad = int(np.sum(~np.all(np.isfinite(blend), axis=-1)))
            raise ValueError(
                f"score query touched {n_bad} point(s) where the density is below its "
                "positivity floor; enlarge the grid or the series coverage"
            )
        return blend

    def __call__(self, s: float, x: np.ndarray) -> np.ndarray:
        if s < -1e-12 or s > self.horizon + 1e-12:
            raise ValueError(f"reversed time s={s} outside [0, {self.horizon}]")
        t = self.horizon - s
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -self.spec.drift(x) + self.spec.sigma**2 * self.score_at(t, x)

    def at_time(self, s: float) -> VectorField:
        """Frozen snapshot of the reversed drift at reversed time s."""
        return VectorField(
            dim=self.spec.dim,
            eval_fn=lambda x, _s=s: self(_s, x),
            name=f"reversed[{self.spec.drift.name}]@s={s:.6g}",
        )


def reversed_drift(spec: DiffusionSpec, series: DensityTimeSeries) -> ReversedDriftField:
    return ReversedDriftField(spec, series)


def simulate_reversed(
    spec: DiffusionSpec,
    series: DensityTimeSeries,
    n_paths: int,
    n_steps: int,
    seed: int,
) -> PathEnsemble:
    """Integrate the reversed diffusion from p_T with fresh noise.

    The initial law is the final slice of the series; the drift is the
    reversed drift field. In law, the result should match the forward
    ensemble run backwards.
    """
    rdrift = reversed_drift(spec, series)
    T = rdrift.horizon
    dt = T / n_steps
    x0 = GridLaw(series.final()).sample(_init_generator(seed), n_paths)
    noise = draw_noise(seed, n_paths, n_steps, spec.dim, dt)
    states = _integrate(x0, rdrift, spec.sigma, dt, noise)
    return PathEnsemble(
        spec=spec, states=states, noise=noise, dt=dt, seed=seed, kind="reversed",
        meta={"method": "integrated"},
    )


def perturbed_ensemble(base: PathEnsemble, gamma: VectorField, eps: float) -> PathEnsemble:
    """Re-integrate the base ensemble under drift b + eps * gamma.

    Reuses the base ensemble's initial states and stored increments (common
    random numbers), which is what makes central differences in eps usable at
    Monte Carlo noise levels. eps = 0 reproduces the base states bit-for-bit.
    """
    if base.noise is None:
        raise ValueError("base ensemble carries no stored increments")
    if base.spec is None:
        raise ValueError("base ensemble carries no spec")
    if gamma.dim != base.dim:
        raise ValueError("perturbation dimension does not match the ensemble")
    b = base.spec.drift
    states = _integrate(
        base.states[:, 0, :].copy(),
        lambda t, x: b(x) + eps * gamma(x),
        base.spec.sigma,
        base.dt,
        base.noise,
    )
    meta = {"eps": float(eps), "base_seed": int(base.seed), "gamma": gamma.name}
    return PathEnsemble(
        spec=base.spec, states=states, noise=base.noise, dt=base.dt, seed=base.seed,
        kind="perturbed", meta=meta,
    )


# --- flat binary layout ------------------------------------------------------
#
# magic "NLB1" | u32 version | u64 n_paths | u64 n_steps | u64 dim |
# u64 flags (bit 0: increments present) | f64 dt | f64 sigma | u64 seed |
# u32 kind_len | kind utf-8 | u32 drift_len | drift utf-8 |
# states as row-major float64 (n_paths, n_steps+1, dim) |
# [increments as row-major float64 (n_paths, n_steps, dim)]

_HEADER = struct.Struct("<4sIQQQQddQ")


def ensemble_to_binary(ensemble: PathEnsemble, path) -> None:
    """Write the ensemble to the flat binary layout (see module source)."""
    kind = ensemble.kind.encode()
    drift_name = (ensemble.spec.drift.name if ensemble.spec else "").encode()
    flags = 1 if ensemble.noise is not None else 0
    sigma = ensemble.spec.sigma if ensemble.spec is not None else float("nan")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC, _VERSION, ensemble.n_paths, ensemble.n_steps, ensemble.dim,
                flags, ensemble.dt, sigma, ensemble.seed,
            )
        )
        fh.write(struct.pack("<I", len(kind)))
        fh.write(kind)
        fh.write(struct.pack("<I", len(drift_name)))
        fh.write(drift_name)
        fh.write(np.ascontiguousarray(ensemble.states, dtype="<f8").tobytes())
        if ensemble.noise is not None:
            fh.write(np.ascontiguousarray(ensemble.noise, dtype="<f8").tobytes())


def ensemble_from_binary(path) -> PathEnsemble:
    """Read an ensemble written by ensemble_to_binary. The DiffusionSpec is
    not serialized; the result carries spec=None with dt/seed/kind restored
    and the drift name in meta."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError("truncated ensemble file")
        magic, version, n_paths, n_steps, dim, flags, dt, sigma, seed = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError("not an ensemble file (bad magic)")
        if version != _VERSION:
            raise ValueError(f"unsupported ensemble file version {version}")
        (kind_len,) = struct.unpack("<I", fh.read(4))
        kind = fh.read(kind_len).decode()
        (drift_len,) = struct.unpack("<I", fh.read(4))
        drift_name = fh.read(drift_len).decode()
        n_state = n_paths * (n_steps + 1) * dim
        states = np.frombuffer(fh.read(8 * n_state), dtype="<f8").reshape(n_paths, n_steps + 1, dim).copy()
        noise = None
        if flags & 1:
            n_noise = n_paths * n_steps * dim
            noise = np.frombuffer(fh.read(8 * n_noise), dtype="<f8").reshape(n_paths, n_steps, dim).copy()
    meta = {"drift": drift_name, "sigma": sigma}
    return PathEnsemble(spec=None, states=states, noise=noise, dt=dt, seed=seed, kind=kind, meta=meta)
