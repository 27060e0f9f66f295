"""Exception types shared across the package.

Every error raised by spinet derives from SpinetError so callers can catch
the whole family; the subclasses distinguish the documented failure modes
(shape vs. configuration vs. state vs. file format).
"""


class SpinetError(Exception):
    """Base class for all spinet errors."""


class ShapeError(SpinetError, ValueError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(SpinetError, ValueError):
    """Invalid hyperparameter or option value."""


class ValidationError(SpinetError, ValueError):
    """Input values outside the operation's domain."""


class EmptyInputError(SpinetError, ValueError):
    """An operation received zero frames / zero elements where >= 1 is required."""


class StateError(SpinetError, RuntimeError):
    """Operation requires state that has not been initialized (or was lost)."""


class UsageError(SpinetError, RuntimeError):
    """API misuse, e.g. backward() on a non-scalar."""


class SelectionError(SpinetError, ValueError):
    """Frame selection left nothing to work with."""


class FormatError(SpinetError, ValueError):
    """A serialized artifact is corrupt (bad magic, malformed section)."""


class TruncationError(FormatError):
    """A serialized artifact ended before its declared payload."""


class VersionError(FormatError):
    """A serialized artifact declares an unsupported format version."""


class ManifestError(FormatError):
    """A checkpoint manifest is internally inconsistent."""


class DivergenceError(SpinetError, RuntimeError):
    """Training produced a non-finite loss."""
