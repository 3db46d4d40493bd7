"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 2,
data problems exit 3, numeric failures exit 4.
"""


class RsmError(Exception):
    """Base class for all package errors."""


class ShapeError(RsmError):
    """Operand shapes do not conform; message carries both shapes."""


class PermutationError(RsmError):
    """An index array passed as a permutation is not a bijection."""


class NumericError(RsmError):
    """A non-finite value was produced while checked mode is active."""


class GraphError(RsmError):
    """Invalid use of the autodiff tape (non-scalar loss, detached graph,
    or a second backward pass without rebuilding the graph)."""


class DataError(RsmError):
    """Malformed raster files, dataset layout problems, or incompatible
    extents (divisibility violations)."""


class ConfigError(RsmError):
    """Unknown or invalid configuration keys/values."""
