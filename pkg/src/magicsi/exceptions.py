"""Exception hierarchy.

Each error class carries the CLI exit code it maps to.
"""


class MagicError(Exception):
    exit_code = 4


class ArgumentError(MagicError, ValueError):
    exit_code = 2


class ConfigError(ArgumentError):
    exit_code = 2


class DataError(MagicError, ValueError):
    exit_code = 3


class InfeasibleTruncationError(ArgumentError):
    pass


class ConvergenceError(MagicError, RuntimeError):
    """Solver or fitter did not converge; ``residual`` is the last KKT residual."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3g})")
        self.residual = residual


class ConstraintViolationError(MagicError, ValueError):
    """A state lies outside the sign/subgradient constraint set."""


class SingularSelectionError(MagicError, ArithmeticError):
    """Selected columns are rank deficient."""


class ModelFitError(MagicError, RuntimeError):
    """Unpenalized refit failed (e.g. separation)."""


class SamplerInitError(MagicError, ValueError):
    pass


class GridTooCoarseError(MagicError, ValueError):
    """No grid point was retained when inverting the test."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
