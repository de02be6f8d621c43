"""Exception hierarchy shared by every module of the package."""


class TripletError(Exception):
    """Base class for all package errors."""


class ConfigError(TripletError, ValueError):
    pass


class NormalizationError(TripletError, ValueError):
    pass


class DimensionError(TripletError, ValueError):
    pass


class EmptyIdentityError(TripletError, ValueError):
    pass


class NumericalError(TripletError, FloatingPointError):
    pass


class TraceError(TripletError):
    """Raised when a forward trace is used with parameters other than the ones that produced it."""


class LabelError(TripletError, ValueError):
    pass


class ScopeTooSmallError(TripletError):
    """The sampling scope holds fewer eligible identities than the batch needs."""

    def __init__(self, message, eligible=0, required=0):
        super().__init__(message)
        self.eligible = eligible
        self.required = required


class CleaningCollapseError(TripletError):
    pass


class EmptyIndexError(TripletError, ValueError):
    pass


class IndexMismatchError(TripletError, ValueError):
    pass


class FormatError(TripletError, ValueError):
    """Malformed binary or text container."""
