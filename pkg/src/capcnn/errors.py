"""Exception types shared across the package."""


class CapError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(CapError, ValueError):
    """An array shape or size does not match what the operation requires."""


class InvalidBatchError(CapError, ValueError):
    """A batch is unusable, e.g. fewer than 2 samples in training mode."""


class CorruptedStateError(CapError, ValueError):
    """Persistent state violates its own invariants (e.g. negative variance)."""


class InsufficientDataError(CapError, ValueError):
    """A class has too few samples for the requested operation."""


class FormatError(CapError, ValueError):
    """A file or byte stream does not follow its declared layout."""


class TruncationError(FormatError):
    """A file or byte stream ends before its declared contents."""


class ChannelNotFoundError(CapError, LookupError):
    """The requested signal label is absent from a recording."""
