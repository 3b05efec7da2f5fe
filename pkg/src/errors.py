class DimensionError(ValueError):
    """Raised when array shapes or image geometry do not fit an operation."""


class ConfigError(ValueError):
    """Raised for invalid architecture, delta, noise or run configuration."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its documented contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class ArchiveError(ValueError):
    """Raised when a tensor archive cannot be written, parsed or applied."""


class IngestionError(FileNotFoundError):
    """Raised when a dataset directory is missing files."""
