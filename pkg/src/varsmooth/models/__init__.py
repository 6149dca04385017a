"""Model constructors and the ModelSpec/Dataset contracts."""

from .base import Dataset, ModelSpec, mvn_logpdf, residual_consistency, simulate
from .lgssm import make_lgssm
from .pendulum import make_pendulum
from .stochvol import make_stochvol

__all__ = [
    "Dataset",
    "ModelSpec",
    "make_lgssm",
    "make_pendulum",
    "make_stochvol",
    "mvn_logpdf",
    "residual_consistency",
    "simulate",
]
