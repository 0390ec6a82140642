"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ArgumentError and DimensionError -> 2,
DataError -> 3, NumericError -> 4.
"""


class GexmapError(Exception):
    """Base class for all package errors."""


class ArgumentError(GexmapError, ValueError):
    """An argument is outside its documented domain."""


class DimensionError(GexmapError, ValueError):
    """Tensor or raster extents are incompatible."""


class DataError(GexmapError):
    """An input file is missing, malformed or fails validation."""


class NumericError(GexmapError, ArithmeticError):
    """A non-finite or degenerate numeric state was reached."""
