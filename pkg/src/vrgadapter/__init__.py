"""Vertex random graph adapter: Gaussian class graphs, sampled text prototypes
and kurtosis-weighted multi-branch fusion over cached embedding bundles."""

from vrgadapter.errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    InvariantError,
    NumericalError,
    VRGError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "InvariantError",
    "NumericalError",
    "VRGError",
    "__version__",
]
