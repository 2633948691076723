"""latentune: three-phase controller parameter tuning.

Phase 1 harvests well-performing parameter vectors with trust-region Bayesian
optimization, phase 2 learns a low-dimensional latent representation of the
stable set with an autoencoder, and phase 3 re-runs the trust-region search in
the latent box through the decoder at a fraction of the evaluation budget.
"""

from latentune.params import (
    Bounds,
    CostSample,
    ParamVector,
    Phase,
    ReplayBuffer,
    Space,
    denormalize,
    filter_stable,
    normalize,
)

__version__ = "0.1.0"

__all__ = [
    "Bounds",
    "CostSample",
    "ParamVector",
    "Phase",
    "ReplayBuffer",
    "Space",
    "denormalize",
    "filter_stable",
    "normalize",
    "__version__",
]
