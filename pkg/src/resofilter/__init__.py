"""Parameter-difference data filtering on a desk-scale transformer."""

from .errors import ConfigError, DataError, DomainError, ResoFilterError, SchemaError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "ResoFilterError",
    "SchemaError",
    "ShapeError",
]
