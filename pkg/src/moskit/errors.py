"""Exception hierarchy shared across the toolkit."""


class MoskitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(MoskitError, ValueError):
    """A file could not be parsed; carries a line number where possible."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MoskitError, ValueError):
    """Input data violates a domain invariant (score range, duplicates, ...)."""


class UnknownListenerError(ValidationError):
    """A listener id is absent from the training registry."""


class ConfigError(MoskitError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(MoskitError, ValueError):
    """A binary feature file is malformed (bad magic, truncated payload, ...)."""


class DimensionError(MoskitError, ValueError):
    """A feature or embedding has a different dimensionality than configured."""


class AlignmentError(MoskitError, ValueError):
    """Two sequences that must be aligned disagree (frame counts, key sets)."""


class ShapeError(MoskitError, ValueError):
    """Tensor or vector shapes are incompatible."""


class CoverageError(MoskitError, KeyError):
    """A prediction set does not cover every required utterance."""

    def __init__(self, message: str, missing: tuple[str, ...] = ()):
        super().__init__(message)
        self.missing = missing

    def __str__(self) -> str:  # KeyError quotes its arg by default
        return self.args[0]


class DependencyError(MoskitError, FileNotFoundError):
    """An external input this operation depends on is missing."""


class UndefinedCorrelationError(MoskitError, ArithmeticError):
    """Correlation is undefined (constant input or fewer than 2 points)."""


class ModeError(MoskitError, RuntimeError):
    """The model does not support the requested inference mode."""


class TrainingError(MoskitError, RuntimeError):
    """Training aborted (non-finite loss or similar), with diagnostics."""
