"""Exception hierarchy shared across the package."""


class ResoFilterError(Exception):
    """Base class for all package errors."""


class ConfigError(ResoFilterError, ValueError):
    pass


class DataError(ResoFilterError, ValueError):
    pass


class SchemaError(DataError):
    pass


class DomainError(ResoFilterError, ValueError):
    pass


class ShapeError(ResoFilterError, ValueError):
    pass
