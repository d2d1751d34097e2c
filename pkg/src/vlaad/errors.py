"""Shared exception types for the toolkit."""


class VlaadError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(VlaadError, ValueError):
    """A vector or parameter tensor has the wrong shape."""


class DegenerateInputError(VlaadError, ValueError):
    """Zero-norm or otherwise numerically unusable input."""


class EmptyInputError(VlaadError, ValueError):
    """An input that must be non-empty is empty."""


class ValidationError(VlaadError, ValueError):
    """A record, config, or argument violates its schema invariants."""


class SummarizerError(VlaadError, RuntimeError):
    """Summarizer endpoint unreachable or returned an unusable response."""


class NonFiniteLossError(VlaadError, RuntimeError):
    """Training produced a non-finite loss; message carries epoch/batch."""
