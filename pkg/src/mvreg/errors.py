"""Exception hierarchy shared by all mvreg modules."""


class MvregError(Exception):
    """Base class for every error raised by mvreg."""


class ValidationError(MvregError, ValueError):
    """An argument or configuration violates a documented invariant."""


class FormatError(MvregError):
    """A file does not follow the expected container format."""


class MalformedHeaderError(FormatError):
    """Bad magic line, unparsable JSON header, or unsupported dtype."""


class TruncatedPayloadError(FormatError):
    """The payload ends before the count declared by the header."""


class PayloadMismatchError(FormatError):
    """The payload holds more values than the header declares."""


class DimensionMismatchError(MvregError, ValueError):
    """Two images that must share dimensions do not."""


class ZeroVarianceError(MvregError, ValueError):
    """A measure needs a nonconstant image and received a constant one."""


class ObjectiveError(MvregError):
    """The objective returned a non-finite value or raised."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ShapeError(MvregError, ValueError):
    """A tensor does not have the shape a layer expects."""


class TrainingError(MvregError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class RegistrationError(MvregError):
    """A registration iteration failed; carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(MvregError):
    """Invalid, conflicting, or missing configuration."""


class UnknownKeyError(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown configuration key: {key!r}")
        self.key = key
