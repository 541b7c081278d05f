"""latentlab: linear-Gaussian latent variable models.

Factor analysis fit by EM, probabilistic PCA (closed-form MLE and EM),
evidence-lower-bound machinery, and a minimal VAE trained either by
EM-style alternation or by backpropagation on a from-scratch reverse-mode
autodiff engine.  Everything is deterministic given a seed.
"""

from .rng import Rng, rng
from .gaussian import (
    GaussianDiag,
    GaussianError,
    GaussianFull,
    JointGaussianBlocks,
    NotPositiveDefiniteError,
    conditional,
    kl_monte_carlo,
    kl_multivariate,
    kl_univariate,
    log_density,
    marginal,
    sample,
)

__all__ = [
    "Rng",
    "rng",
    "GaussianDiag",
    "GaussianError",
    "GaussianFull",
    "JointGaussianBlocks",
    "NotPositiveDefiniteError",
    "conditional",
    "kl_monte_carlo",
    "kl_multivariate",
    "kl_univariate",
    "log_density",
    "marginal",
    "sample",
]

__version__ = "0.1.0"
