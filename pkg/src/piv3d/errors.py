"""Shared exception types."""


class Piv3dError(Exception):
    """Base class for all piv3d errors."""


class NoIntersectionError(Piv3dError):
    """A back-projected ray misses the reconstruction domain."""


class DimensionMismatchError(Piv3dError):
    """Array shapes of two inputs that must agree do not."""


class NonFiniteError(Piv3dError):
    """An energy or gradient evaluated to NaN or infinity."""
