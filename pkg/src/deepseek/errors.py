"""Exception taxonomy shared across the package.

Operational failures raise a DeepSeekError subclass so callers (CLI,
service) can map them to exit codes / HTTP statuses without matching on
message text.
"""


class DeepSeekError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DeepSeekError):
    """Dimension or shape mismatch between arrays."""


class FormatError(DeepSeekError):
    """A file does not carry the expected magic/version."""


class IntegrityError(DeepSeekError):
    """A file or record set is internally inconsistent (truncation,
    duplicate ids, mixed dimensions)."""


class DataError(DeepSeekError):
    """Invalid runtime data: failed joins, non-finite values, empty
    inputs where non-empty is required."""
