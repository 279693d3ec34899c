"""Exception hierarchy and the process exit codes the CLI maps onto."""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ToolError(Exception):
    """Base class for every error this package raises on purpose."""

    exit_code = 1


class ValidationError(ToolError, ValueError):
    """Rejected input: bad shapes, ranks, budgets, or malformed requests."""

    exit_code = EXIT_VALIDATION


class ShapeError(ValidationError):
    """Matrix or vector dimensions do not fit the operation."""


class RankError(ValidationError):
    """Rank parameter outside the valid range for the given matrices."""


class SelectionError(ValidationError):
    """Chunk selection inconsistent with the model shape."""


class SearchSpaceError(ValidationError):
    """Exhaustive search space exceeds the hard guard."""


class CalibrationError(ValidationError):
    """Calibration batch is empty or inconsistent with the model."""


class CacheLayoutError(ValidationError):
    """KV cache layout does not match the requested operation."""


class BudgetError(ValidationError):
    """Cache budget cannot be met; carries the nearest achievable ratios."""

    def __init__(self, message, nearest=()):
        super().__init__(message)
        self.nearest = tuple(nearest)


class NumericError(ToolError, ArithmeticError):
    """Iterative kernel failed to converge; carries the final residual."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FormatError(ToolError, OSError):
    """File does not conform to one of the binary or JSON artifact formats."""

    exit_code = EXIT_IO
