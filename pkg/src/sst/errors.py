"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`SSTError`,
so callers (and the CLI) can distinguish expected failures from bugs.
"""


class SSTError(Exception):
    """Base class for all errors raised by sst."""


class ValidationError(SSTError):
    """A spec, config, or argument violates its documented constraints."""


class ShapeError(ValidationError):
    """Array dimensions do not match what an operation requires."""


class LabelRangeError(ValidationError):
    """A label falls outside [0, num_classes)."""


class CapacityError(ValidationError):
    """A resource budget is violated: slice sizes exceed the pool, or a
    schedule's parameter count decreases."""


class DivergenceError(SSTError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, lr: float, iteration=None):
        self.epoch = epoch
        self.lr = lr
        self.iteration = iteration
        msg = f"non-finite loss at epoch {epoch} (lr={lr})"
        if iteration is not None:
            msg += f" during stream iteration {iteration}"
        super().__init__(msg)


class BadMagicError(SSTError):
    """A file does not start with the expected magic bytes."""


class TruncatedFileError(SSTError):
    """A file ended before its declared payload."""


class FormatVersionError(SSTError):
    """A file declares an unsupported format version."""


class FingerprintMismatchError(SSTError):
    """An artifact was produced under a different manifest or model."""


class ManifestError(ValidationError):
    """A run manifest failed to parse or validate."""


class LockError(SSTError):
    """Another run owns the output directory."""
