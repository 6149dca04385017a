"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (2 = configuration,
3 = I/O, 4 = solver failure), so library code should raise the most
specific one that applies.
"""


class VarsmoothError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VarsmoothError):
    """Invalid user-supplied configuration (bad matrix, unknown key, ...)."""


class NumericalError(VarsmoothError):
    """A numerical operation failed (singular matrix, non-SPD input, ...)."""


class EvaluationError(VarsmoothError):
    """A user- or model-supplied function produced NaN where it must not."""


class UnsupportedOperationError(VarsmoothError):
    """The model does not implement the requested capability."""
