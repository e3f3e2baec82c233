"""Exception hierarchy shared across the package."""


class EyeexprError(Exception):
    """Base class for all package errors."""

    #: short machine-parseable class tag used by the CLI
    slug = "error"


class InputError(EyeexprError):
    """Caller supplied invalid data (bad shapes, out-of-range values, ...)."""

    slug = "input"


class ConfigError(EyeexprError):
    """Invalid or inconsistent configuration (layer shapes, unknown keys, ...)."""

    slug = "config"


class FormatError(EyeexprError):
    """A serialized artifact (checkpoint, profile, PGM) is corrupt or mismatched."""

    slug = "format"


class NumericsError(EyeexprError):
    """Non-finite values encountered where finiteness is required."""

    slug = "numerics"


class LeakageError(EyeexprError):
    """A held-out participant's data was found in a training split."""

    slug = "leakage"


class EnrollmentError(EyeexprError):
    """A personalized model was invoked without a personalization profile."""

    slug = "enrollment"


class InternalError(EyeexprError):
    """Invariant violation inside the library itself."""

    slug = "internal"
