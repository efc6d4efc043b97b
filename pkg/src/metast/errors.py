"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerics 4),
so library code should raise the most specific class that applies.
"""


class MetastError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(MetastError):
    """Invalid or inconsistent configuration values."""


class DataError(MetastError):
    """Unusable input data: wrong shapes, empty spans, missing columns."""


class NumericsError(MetastError):
    """A computation produced NaN/Inf or an otherwise unusable number."""


class ShapeError(MetastError):
    """Tensor operands with incompatible dimensions."""


class GraphError(MetastError):
    """Misuse of the autodiff graph (non-scalar loss, bad wrt list)."""
