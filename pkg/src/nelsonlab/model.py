"""Drift fields, diffusion specifications, and the static gradient test.

A drift is a vector field b : R^d -> R^d together with whatever exact
structure is known about it (Jacobian, potential, component Laplacians).
Everything downstream (simulation, Nelson derivatives, the divergence
identity) consumes drifts through this interface, so finite-difference
fallbacks live here and nowhere else.

Conventions: points are arrays of shape (..., d); a field evaluation
returns shape (..., d); a Jacobian evaluation returns (..., d, d) with
J[..., i, j] = d b^i / d x_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "VectorField",
    "AntisymmetricPart",
    "DiffusionSpec",
    "PointMass",
    "GaussianLaw",
    "builtin_drift",
    "linear_drift",
    "antisymmetric_part",
    "gradient_test_static",
    "default_probes",
    "BUILTIN_DRIFT_NAMES",
]

_FD_JAC_SCALE = 1e-5   # relative step for Jacobian differences
_FD_LAP_SCALE = 1e-4   # relative step for second differences


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape == (dim,):
        return x[None, :]
    if x.ndim >= 1 and x.shape[-1] == dim:
        return x
    raise ValueError(f"expected points of shape (..., {dim}), got {x.shape}")


@dataclass(frozen=True)
class VectorField:
    """A smooth vector field with optional exact derivative structure.

    Parameters
    ----------
    dim : int
        Ambient dimension d.
    eval_fn : callable
        Vectorized evaluation, (..., d) -> (..., d).
    jacobian_fn : callable, optional
        (..., d) -> (..., d, d), J[..., i, j] = d_j b^i. Finite differences
        are used when absent.
    potential_fn, grad_potential_fn : callable, optional
        U and grad U when b = grad U is known exactly.
    laplacian_fn : callable, optional
        Componentwise Laplacian, (..., d) -> (..., d) with (Lap b)^i = sum_j d_jj b^i.
    grad_div_fn : callable, optional
        Gradient of the divergence, (..., d) -> (..., d).
    name : str
        Human-readable identifier used in reports.
    params : tuple
        Parameters the field was built with (for descriptors).
    """

    dim: int
    eval_fn: Callable[[np.ndarray], np.ndarray]
    jacobian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_potential_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    laplacian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_div_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def __call__(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        out = np.asarray(self.eval_fn(x), dtype=float)
        if out.shape != x.shape:
            raise ValueError(
                f"drift '{self.name}' returned shape {out.shape} for input {x.shape}"
            )
        return out

    @property
    def has_potential(self) -> bool:
        return self.potential_fn is not None

    def potential(self, x) -> np.ndarray:
        if self.potential_fn is None:
            raise ValueError(f"drift '{self.name}' has no known potential")
        x = _as_points(x, self.dim)
        return np.asarray(self.potential_fn(x), dtype=float)

    def grad_potential(self, x) -> np.ndarray:
        if self.grad_potential_fn is not None:
            x = _as_points(x, self.dim)
            return np.asarray(self.grad_potential_fn(x), dtype=float)
        if self.potential_fn is None:
            raise ValueError(f"drift '{self.name}' has no known potential")
        return self(x)  # by convention b = grad U when a potential is declared

    def jacobian(self, x) -> np.ndarray:
        """J[..., i, j] = d b^i / d x_j, exact when available else central differences."""
        x = _as_points(x, self.dim)
        if self.jacobian_fn is not None:
            J = np.asarray(self.jacobian_fn(x), dtype=float)
            want = x.shape + (self.dim,)
            if J.shape != want:
                raise ValueError(
                    f"jacobian of '{self.name}' returned {J.shape}, expected {want}"
                )
            return J
        return self._fd_jacobian(x)

    def _fd_jacobian(self, x: np.ndarray) -> np.ndarray:
        d = self.dim
        h = _FD_JAC_SCALE * np.maximum(1.0, np.abs(x).max(axis=-1))[..., None]
        J = np.empty(x.shape + (d,))
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            fp = self(x + h * e)
            fm = self(x - h * e)
            J[..., :, j] = (fp - fm) / (2.0 * h)
        return J

    def laplacian(self, x) -> np.ndarray:
        """Componentwise Laplacian, exact when available else second differences."""
        x = _as_points(x, self.dim)
        if self.laplacian_fn is not None:
            return np.asarray(self.laplacian_fn(x), dtype=float)
        d = self.dim
        h = _FD_LAP_SCALE * np.maximum(1.0, np.abs(x).max(axis=-1))[..., None]
        f0 = self(x)
        out = np.zeros_like(f0)
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            out += (self(x + h * e) - 2.0 * f0 + self(x - h * e)) / h**2
        return out

    def grad_div(self, x) -> np.ndarray:
        """grad(div b). Exact when available, else differences of the Jacobian trace."""
        x = _as_points(x, self.dim)
        if self.grad_div_fn is not None:
            return np.asarray(self.grad_div_fn(x), dtype=float)
        d = self.dim
        h = _FD_JAC_SCALE * np.maximum(1.0, np.abs(x).max(axis=-1))[..., None]
        out = np.empty_like(np.asarray(x, dtype=float))
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            div_p = np.trace(self.jacobian(x + h * e), axis1=-2, axis2=-1)
            div_m = np.trace(self.jacobian(x - h * e), axis1=-2, axis2=-1)
            out[..., j] = (div_p - div_m) / (2.0 * h[..., 0])
        return out


BUILTIN_DRIFT_NAMES = ("ou", "double_well", "rotational_linear", "shear", "custom_linear")


def linear_drift(A, name: str = "custom_linear") -> VectorField:
    """Drift b(x) = A x. Carries a potential U = x^T A x / 2 iff A is symmetric."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    d = A.shape[0]
    symmetric = bool(np.array_equal(A, A.T))

    def ev(x):
        return x @ A.T

    def jac(x):
        return np.broadcast_to(A, x.shape + (d,)).copy()

    kw = {}
    if symmetric:
        kw["potential_fn"] = lambda x: 0.5 * np.einsum("...i,ij,...j->...", x, A, x)
        kw["grad_potential_fn"] = ev
    return VectorField(
        dim=d,
        eval_fn=ev,
        jacobian_fn=jac,
        laplacian_fn=lambda x: np.zeros_like(x),
        grad_div_fn=lambda x: np.zeros_like(x),
        name=name,
        params=tuple(A.ravel()),
        **kw,
    )


def builtin_drift(name: str, params: Sequence[float] = (), dim: Optional[int] = None) -> VectorField:
    """Construct one of the named drift families.

    ou(theta=1, any d)           b = -theta x,        U = -theta |x|^2 / 2
    double_well(d=1)             b = x - x^3,         U = x^2/2 - x^4/4
    rotational_linear(d=2)       b = A x, A = [[-1,-1],[1,-1]]   (no potential)
    shear(s=1, d=2)              b = A x, A = [[-1, s],[0,-1]]
    custom_linear(A flattened)   b = A x, potential iff A symmetric
    """
    params = tuple(float(p) for p in params)
    if name == "ou":
        theta = params[0] if params else 1.0
        if theta <= 0:
            raise ValueError("ou drift needs theta > 0")
        d = 1 if dim is None else int(dim)
        return VectorField(
            dim=d,
            eval_fn=lambda x: -theta * x,
            jacobian_fn=lambda x: np.broadcast_to(-theta * np.eye(d), x.shape + (d,)).copy(),
            potential_fn=lambda x: -0.5 * theta * np.sum(x * x, axis=-1),
            grad_potential_fn=lambda x: -theta * x,
            laplacian_fn=lambda x: np.zeros_like(x),
            grad_div_fn=lambda x: np.zeros_like(x),
            name="ou",
            params=(theta,),
        )
    if name == "double_well":
        if dim not in (None, 1):
            raise ValueError("double_well drift is one-dimensional")
        return VectorField(
            dim=1,
            eval_fn=lambda x: x - x**3,
            jacobian_fn=lambda x: (1.0 - 3.0 * x**2)[..., None],
            potential_fn=lambda x: (0.5 * x[..., 0] ** 2 - 0.25 * x[..., 0] ** 4),
            grad_potential_fn=lambda x: x - x**3,
            laplacian_fn=lambda x: -6.0 * x,
            grad_div_fn=lambda x: -6.0 * x,
            name="double_well",
        )
    if name == "rotational_linear":
        if dim not in (None, 2):
            raise ValueError("rotational_linear drift is two-dimensional")
        return replace(linear_drift([[-1.0, -1.0], [1.0, -1.0]]), name="rotational_linear", params=())
    if name == "shear":
        s = params[0] if params else 1.0
        if dim not in (None, 2):
            raise ValueError("shear drift is two-dimensional")
        return replace(linear_drift([[-1.0, s], [0.0, -1.0]]), name="shear", params=(s,))
    if name == "custom_linear":
        if not params:
            raise ValueError("custom_linear needs the matrix entries as params")
        n = len(params)
        d = int(round(n**0.5))
        if d * d != n:
            raise ValueError("custom_linear params must be a flattened square matrix")
        if dim is not None and dim != d:
            raise ValueError(f"custom_linear matrix is {d}x{d} but dim={dim} requested")
        return linear_drift(np.asarray(params).reshape(d, d))
    raise ValueError(f"unknown drift '{name}'; known: {', '.join(BUILTIN_DRIFT_NAMES)}")


@dataclass(frozen=True)
class AntisymmetricPart:
    """G = J^T - J for a drift Jacobian J, i.e. G[i, j] = d_i b^j - d_j b^i.

    G vanishes identically iff the drift is (locally) a gradient. Row i of G
    is the vector field G_i appearing in the divergence identity; its
    divergence is div G_i = d_i(div b) - (Lap b)^i.
    """

    drift: VectorField

    @property
    def dim(self) -> int:
        return self.drift.dim

    def __call__(self, x) -> np.ndarray:
        J = self.drift.jacobian(x)
        return np.swapaxes(J, -1, -2) - J

    def row(self, x, i: int) -> np.ndarray:
        return self(x)[..., i, :]

    def div_rows(self, x) -> np.ndarray:
        """(div G_1, ..., div G_d) evaluated at x, shape (..., d)."""
        return self.drift.grad_div(x) - self.drift.laplacian(x)

    def max_entry(self, x) -> float:
        return float(np.max(np.abs(self(x))))


def antisymmetric_part(drift: VectorField) -> AntisymmetricPart:
    return AntisymmetricPart(drift)


def default_probes(dim: int, n: int = 128, radius: float = 3.0, seed: int = 0) -> np.ndarray:
    """Low-discrepancy-ish probe points in [-radius, radius]^d (fixed seed: deterministic)."""
    rng = np.random.default_rng(seed)
    return radius * (2.0 * rng.random((n, dim)) - 1.0)


def gradient_test_static(drift: VectorField, probes=None, tol: float = 1e-8):
    """Decide whether b is a gradient field by probing for curl.

    Returns (verdict, residual) where residual = max over probes of the
    largest |G| entry and verdict is "gradient" iff residual <= tol.
    """
    if probes is None:
        probes = default_probes(drift.dim)
    probes = _as_points(probes, drift.dim)
    if drift.dim == 1:
        return "gradient", 0.0  # every 1-d field is a gradient
    G = antisymmetric_part(drift)
    residual = G.max_entry(probes)
    # finite-difference Jacobians carry O(h) noise; widen the cut accordingly
    cut = tol if drift.jacobian_fn is not None else max(tol, 1e-6)
    verdict = "gradient" if residual <= cut else "non_gradient"
    return verdict, residual


class BlowUpError(RuntimeError):
    """Raised when a trajectory leaves the numerically trusted region."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class PointMass:
    """Deterministic initial condition X_0 = x0."""

    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(self.x0, (n, 1))

    def mean(self) -> np.ndarray:
        return self.x0.copy()

    def cov(self) -> np.ndarray:
        return np.zeros((self.dim, self.dim))

    def describe(self) -> dict:
        return {"kind": "point", "x0": self.x0.tolist()}


@dataclass(frozen=True)
class GaussianLaw:
    """Gaussian initial law N(mean, cov)."""

    mean_vec: np.ndarray
    cov_mat: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean_vec, dtype=float))
        C = np.asarray(self.cov_mat, dtype=float)
        if C.ndim == 0:
            C = C * np.eye(m.shape[0])
        if C.shape != (m.shape[0], m.shape[0]):
            raise ValueError("cov shape does not match mean")
        if not np.allclose(C, C.T):
            raise ValueError("cov must be symmetric")
        w = np.linalg.eigvalsh(C)
        if w.min() < -1e-12 * max(1.0, w.max()):
            raise ValueError("cov must be positive semidefinite")
        object.__setattr__(self, "mean_vec", m)
        object.__setattr__(self, "cov_mat", C)

    @property
    def dim(self) -> int:
        return self.mean_vec.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.multivariate_normal(self.mean_vec, self.cov_mat, size=n, method="cholesky" if _is_pd(self.cov_mat) else "eigh")

    def mean(self) -> np.ndarray:
        return self.mean_vec.copy()

    def cov(self) -> np.ndarray:
        return self.cov_mat.copy()

    def describe(self) -> dict:
        return {
            "kind": "gaussian",
            "mean": self.mean_vec.tolist(),
            "cov": self.cov_mat.tolist(),
        }


def _is_pd(C: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(C)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class DiffusionSpec:
    """A diffusion dX = b(X) dt + sigma dW with an initial law and horizon.

    sigma is a constant scalar. sigma = 0 is accepted (deterministic flow,
    useful as an integrator oracle); operations that need densities or time
    reversal refuse it.
    """

    drift: VectorField
    sigma: float
    initial_law: object
    horizon: float
    dim: int = field(default=0)

    def __post_init__(self):
        if self.dim == 0:
            object.__setattr__(self, "dim", self.drift.dim)
        if self.dim != self.drift.dim:
            raise ValueError(f"dim={self.dim} but drift has dim {self.drift.dim}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be a finite scalar >= 0")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ValueError("horizon must be a finite scalar > 0")
        law_dim = getattr(self.initial_law, "dim", None)
        if law_dim is not None and law_dim != self.dim:
            raise ValueError(f"initial law has dim {law_dim}, spec has dim {self.dim}")
        if not hasattr(self.initial_law, "sample"):
            raise ValueError("initial_law must provide .sample(rng, n)")

    def descriptor(self) -> dict:
        """Stable JSON-safe description used in reports and manifests."""
        law = self.initial_law.describe() if hasattr(self.initial_law, "describe") else {"kind": "custom"}
        return {
            "drift": self.drift.name,
            "drift_params": [float(p) for p in self.drift.params],
            "dim": int(self.dim),
            "sigma": float(self.sigma),
            "horizon": float(self.horizon),
            "initial_law": law,
        }
