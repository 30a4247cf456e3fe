"""Exception hierarchy."""


class ProxRLError(Exception):
    """Base class for all library errors."""


class ValidationError(ProxRLError, ValueError):
    """Input data or configuration violates a documented constraint."""


class ParseError(ValidationError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StructuralError(ValidationError):
    """Trajectory structure is inconsistent (gaps, ragged lengths, dims)."""


class ConfigurationError(ValidationError):
    """Invalid configuration value."""


class DomainError(ValidationError):
    """Argument outside the support of a distribution or function."""


class NumericalInputError(ValidationError):
    """Matrix input fails a numerical precondition (e.g. symmetry)."""


class DegenerateBandwidthError(ProxRLError, ValueError):
    """Median pairwise distance is zero."""


class EstimationError(ProxRLError, RuntimeError):
    """Fitting the bridge function failed."""


class DivergenceError(EstimationError):
    """Iterative optimization diverged."""


class FixtureError(ProxRLError, RuntimeError):
    """A shipped fixture is missing or unreadable."""
