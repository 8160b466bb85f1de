"""Exception types shared across the package.

Every failure mode callers are expected to handle gets its own class so
tests and the CLI can match on type rather than message text.
"""


class DpFedError(Exception):
    """Base class for all package errors."""


class InvalidValue(DpFedError):
    """A numeric argument is out of range, non-finite, or NaN."""


class InvalidScale(DpFedError):
    """A noise scale is zero, negative, or non-finite."""


class InvalidFraction(DpFedError):
    """A fraction argument is outside the open interval (0, 1)."""


class EmptyDataset(DpFedError):
    """An operation requires at least one record or sequence."""


class GaussianRequiresDelta(DpFedError):
    """The Gaussian mechanism was asked to run with delta = 0."""


class BudgetExceeded(DpFedError):
    """Composing a step would push spend past the privacy budget."""


class NotAdjacent(DpFedError):
    """Two datasets offered as neighbours differ in more than one record."""


class ShapeError(DpFedError):
    """Array dimensions do not match what the operation expects."""


class LabelError(DpFedError):
    """A class label lies outside [0, num_classes)."""


class CacheError(DpFedError):
    """A forward cache was produced by a different network."""


class InvalidGradient(DpFedError):
    """A gradient vector contains NaN or infinite entries."""


class FormatError(DpFedError):
    """A file does not conform to its binary format."""


class ProtocolError(DpFedError):
    """A peer sent a message that violates the session protocol."""


class DecodeError(DpFedError):
    """A byte frame cannot be decoded as a protocol message."""


class TransportError(DpFedError):
    """A socket could not be set up or a connection failed."""


class TimedOut(DpFedError):
    """A peer did not respond within the session timeout."""


class UsageError(DpFedError):
    """Bad command-line arguments or config file contents."""
