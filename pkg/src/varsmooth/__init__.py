"""Joint Gaussian variational smoothing for nonlinear state-space models.

Fits consistency-constrained pairwise Gaussian joints q(theta, x_k,
x_{k+1}) by maximizing a decomposed evidence lower bound evaluated with
sigma-point quadrature, with equality-constrained solvers, exact
reference smoothers, and file/CLI plumbing on top.
"""

from .elbo import ElboBreakdown, ElboEngine, elbo, elbo_breakdown, elbo_gradient
from .errors import (
    ConfigurationError,
    EvaluationError,
    NumericalError,
    UnsupportedOperationError,
    VarsmoothError,
)
from .gaussian import (
    BetaParams,
    Gaussian,
    PairwiseGaussian,
    marginal_theta_x,
    pair_from_moments,
)
from .models import Dataset, ModelSpec, make_lgssm, make_pendulum, make_stochvol, simulate
from .optimizer import SolveReport, SolverOptions, initialize, solve
from .quadrature import SchemeConfig, SigmaPointSet, expect, generate
from .reference import (
    ParticleResult,
    SmootherResult,
    kalman_smoother,
    particle_smoother,
    smoother_to_pairwise,
)

__version__ = "0.1.0"

__all__ = [
    "BetaParams",
    "ConfigurationError",
    "Dataset",
    "ElboBreakdown",
    "ElboEngine",
    "EvaluationError",
    "Gaussian",
    "ModelSpec",
    "NumericalError",
    "PairwiseGaussian",
    "ParticleResult",
    "SchemeConfig",
    "SigmaPointSet",
    "SmootherResult",
    "SolveReport",
    "SolverOptions",
    "UnsupportedOperationError",
    "VarsmoothError",
    "elbo",
    "elbo_breakdown",
    "elbo_gradient",
    "expect",
    "generate",
    "initialize",
    "kalman_smoother",
    "make_lgssm",
    "make_pendulum",
    "make_stochvol",
    "marginal_theta_x",
    "pair_from_moments",
    "particle_smoother",
    "simulate",
    "smoother_to_pairwise",
    "solve",
    "__version__",
]
