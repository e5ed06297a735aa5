"""Exception types shared across the package."""


class SfaoError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(SfaoError):
    pass


class ZeroVector(SfaoError):
    """Raised when an operation needs a nonzero vector (norm > 1e-12)."""


class EmptyBuffer(SfaoError):
    pass


class InvalidThresholds(SfaoError):
    pass


class LengthMismatch(SfaoError):
    pass


class EmptyDataset(SfaoError):
    pass


class BadConfig(SfaoError):
    pass


class IncompleteMatrix(SfaoError):
    pass


class NonFiniteLoss(SfaoError):
    pass


class BadMagic(SfaoError):
    pass


class TruncatedFile(SfaoError):
    pass


class DimOverflow(SfaoError):
    pass
