"""Exception types raised across the package."""


class ClicError(Exception):
    """Base class for all package errors."""


# parsing / files
class MalformedHeader(ClicError, ValueError):
    pass


class UnsupportedFormat(ClicError, ValueError):
    pass


class LengthMismatch(ClicError, ValueError):
    pass


class MissingSample(ClicError, ValueError):
    """A WFDB sample carried the format-16 invalid-sample sentinel (-32768)."""


class ParseError(ClicError, ValueError):
    pass


class InvalidFold(ClicError, ValueError):
    pass


class InvalidConfig(ClicError, ValueError):
    pass


class BadMagic(ClicError, ValueError):
    pass


class VersionMismatch(ClicError, ValueError):
    pass


class TruncatedFile(ClicError, ValueError):
    pass


# text generation / embedding
class NonPositiveDimension(ClicError, ValueError):
    pass


class HttpError(ClicError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class EmptyCompletion(ClicError):
    pass


class ProviderUnavailable(ClicError):
    pass


class DimensionMismatch(ClicError, ValueError):
    pass


class InvalidInput(ClicError, ValueError):
    pass


# model / training
class NonFiniteInput(ClicError, ValueError):
    pass


class SignalTooShort(ClicError, ValueError):
    pass


class ModeMismatch(ClicError, ValueError):
    pass


class NonFiniteLogits(ClicError, ValueError):
    pass


class ShapeMismatch(ClicError, ValueError):
    pass


class EmptySplit(ClicError, ValueError):
    pass


class CheckpointMismatch(ClicError, ValueError):
    pass


# metrics
class EmptyInput(ClicError, ValueError):
    pass


# configuration
class ConfigParseError(ClicError):
    pass


class ConfigValidationError(ClicError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
