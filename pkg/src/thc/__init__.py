"""Homomorphic gradient compression with lookup-table quantization."""

from .errors import (
    DimensionError,
    InfeasibleError,
    OverflowConfigError,
    PreconditionError,
    ProtocolError,
    TableFormatError,
    TableNotFoundError,
    THCError,
)
from .tables import LookupTable, TableKey, solve_optimal_table

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "InfeasibleError",
    "LookupTable",
    "OverflowConfigError",
    "PreconditionError",
    "ProtocolError",
    "TableFormatError",
    "TableKey",
    "TableNotFoundError",
    "THCError",
    "solve_optimal_table",
    "__version__",
]
