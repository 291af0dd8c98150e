"""Error taxonomy shared by all modules.

Exit-code mapping used by the CLI: config/schema problems -> 2,
solver divergence -> 3, exceeded step/size budgets -> 4.
"""


class LevyMfgError(Exception):
    """Base class for all package errors."""


class GridMismatchError(LevyMfgError):
    """Two fields/operators live on different grids."""


class NonFiniteFieldError(LevyMfgError):
    """A field contains NaN or Inf values."""


class UnsupportedOrderError(LevyMfgError):
    """Requested derivative or operator order outside the supported range."""


class SpectralResidueError(LevyMfgError):
    """Imaginary residue after a real spectral operation exceeded tolerance."""


class QuadratureError(LevyMfgError):
    """Numeric Levy-measure quadrature failed its tail/convergence test."""


class ResolutionError(LevyMfgError):
    """The grid cannot resolve a kernel/mollifier at the requested scale."""


class BudgetError(LevyMfgError):
    """A step-size, node-count, or matrix-size budget was exceeded."""


class DivergenceError(LevyMfgError):
    """An iterative solve blew up (non-finite or runaway values)."""


class InstabilityError(LevyMfgError):
    """A conservation/positivity monitor tripped (e.g. mass drift)."""


class SchemaError(LevyMfgError):
    """Run configuration failed validation."""
