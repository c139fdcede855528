"""Community reconstruction on the sparse q-community stochastic block model.

Broadcast processes on regular and Galton-Watson trees, exact and noisy
belief-propagation root posteriors, majority estimators with closed-form
moment oracles, sparse SBM sampling, a spectral black-box partition and the
BP-amplified reconstruction algorithm built on top of it.
"""

__version__ = "0.1.0"

RNG_NAME = "numpy.random.PCG64"

from sbmrecon.model import (  # noqa: E402
    ModelParams,
    NoiseMatrix,
    NoiseMatrixError,
    derive_params,
    noise_family,
    transition_matrix,
    validate_noise_matrix,
)

__all__ = [
    "ModelParams",
    "NoiseMatrix",
    "NoiseMatrixError",
    "RNG_NAME",
    "derive_params",
    "noise_family",
    "transition_matrix",
    "validate_noise_matrix",
    "__version__",
]
