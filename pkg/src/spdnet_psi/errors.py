"""Exception types raised across the package."""


class SpdNetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SpdNetError, ValueError):
    pass


class NotSPDError(SpdNetError, ValueError):
    pass


class SpdOverflowError(SpdNetError, OverflowError):
    pass


class DimMismatchError(SpdNetError, ValueError):
    pass


class NotRepairableError(SpdNetError, ValueError):
    pass


class DegenerateChannelError(SpdNetError, ValueError):
    pass


class InvalidBandError(SpdNetError, ValueError):
    pass


class DatasetFormatError(SpdNetError, ValueError):
    """Base for on-disk dataset problems."""


class VersionMismatchError(DatasetFormatError):
    pass


class SizeMismatchError(DatasetFormatError):
    pass


class InvalidHeaderError(DatasetFormatError):
    pass


class NonFinitePayloadError(DatasetFormatError):
    pass


class EpochTooShortError(SpdNetError, ValueError):
    pass


class DegenerateGeometryError(SpdNetError, ValueError):
    pass


class InsufficientDataError(SpdNetError, ValueError):
    pass


class CacheMismatchError(SpdNetError, RuntimeError):
    pass


class RetractFailureError(SpdNetError, ArithmeticError):
    pass


class DivergenceDetectedError(SpdNetError, ArithmeticError):
    pass


class StratifyError(SpdNetError, ValueError):
    pass


class UndefinedAUCError(SpdNetError, ValueError):
    pass


class ZeroSaliencyError(SpdNetError, ValueError):
    pass
