"""Exception types shared across the package.

The CLI maps these onto exit codes: NumericError exits with 2, every other
pipeline error exits with 1.
"""


class PipelineError(Exception):
    """Base class for all errors this package raises on purpose."""


class InputError(PipelineError):
    """An argument was outside the operation's domain."""


class ConfigError(PipelineError):
    """Dimensions, shapes or configuration values do not fit together."""


class ParseError(PipelineError):
    """A text input could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(PipelineError):
    """An on-disk payload violates its file format contract."""


class NumericError(PipelineError):
    """Non-finite values appeared where finite numbers are required."""
