"""nelsonlab: forward/backward stochastic derivatives for Brownian diffusions.

The package simulates diffusions dX = b(X) dt + sigma dW, computes Nelson's
forward and backward derivative fields both analytically (from drift +
density) and empirically (kernel regression on path ensembles), and runs the
characterization checks that separate gradient drifts from the rest:
stationarity (D+ = -D-), the divergence identity for D-^2 - D+^2, detailed
balance under time reversal, the Newton embedding of the complex second
derivative, and the Girsanov integration-by-parts variation identity.
"""

from .model import (
    VectorField,
    AntisymmetricPart,
    DiffusionSpec,
    PointMass,
    GaussianLaw,
    BlowUpError,
    builtin_drift,
    linear_drift,
    antisymmetric_part,
    gradient_test_static,
)

__version__ = "0.1.0"

__all__ = [
    "VectorField",
    "AntisymmetricPart",
    "DiffusionSpec",
    "PointMass",
    "GaussianLaw",
    "BlowUpError",
    "builtin_drift",
    "linear_drift",
    "antisymmetric_part",
    "gradient_test_static",
    "__version__",
]
