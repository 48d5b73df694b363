"""Exception types shared across the package."""


class FedSpectralError(Exception):
    """Base class for all package errors."""


class DimensionError(FedSpectralError, ValueError):
    """Shapes or lengths of inputs do not match the operation's contract."""


class ContractError(FedSpectralError, ValueError):
    """An input violates a numerical precondition (asymmetry, non-PSD, ...)."""


class InsufficientDataError(FedSpectralError, ValueError):
    """Too few samples or rounds for the requested computation."""


class PartitionError(FedSpectralError, ValueError):
    """A partition regime cannot be realized on the given dataset."""


class IdxFormatError(FedSpectralError, ValueError):
    """An IDX file is malformed (bad magic, truncation, count mismatch)."""


class ConfigError(FedSpectralError, ValueError):
    """A configuration file is missing, malformed, or has invalid values."""
