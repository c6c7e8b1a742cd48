"""Exception types shared across the solver suite."""


class ParameterError(ValueError):
    """A scalar or structural parameter is outside its admissible range."""


class UnsupportedOperation(RuntimeError):
    """The requested operation is not available for this object kind."""


class InvalidDomainError(ValueError):
    """Domain/boundary setup violates a structural requirement (e.g. empty no-slip part)."""


class MeshFormatError(ValueError):
    """Mesh file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshValidationError(ValueError):
    """Mesh data is structurally inconsistent (orientation, coverage, tags)."""


class SmallnessViolationError(RuntimeError):
    """A required smallness inequality fails and force_run was not set."""

    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = margins


class UndefinedRadiiError(ValueError):
    """Invariant-box radii are undefined because the smallness denominator is <= 0."""


class NonConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best iterate and residual history."""

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = list(history) if history is not None else []


class NumericalBreakdownError(RuntimeError):
    """Linear algebra failed in a way that cannot be recovered by damping."""
