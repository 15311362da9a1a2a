"""Exception types shared across the package."""


class RouteCloudError(Exception):
    """Base class for all package errors."""


class DimensionError(RouteCloudError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RouteCloudError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(RouteCloudError, ValueError):
    """Invalid model or training configuration."""


class ParseError(RouteCloudError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(RouteCloudError, ValueError):
    """Parsed data violates a domain invariant."""


class FormatError(RouteCloudError, ValueError):
    """Binary or text grid/checkpoint format mismatch."""


class TrainingError(RouteCloudError, RuntimeError):
    """Training diverged (non-finite loss)."""


class CompatibilityError(RouteCloudError, ValueError):
    """A checkpoint does not fit the requested use (e.g. resolution)."""
