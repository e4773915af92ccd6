"""Exception types shared across the package."""


class CozadError(Exception):
    """Base class for all package-specific errors."""


class FormatError(CozadError):
    """File does not carry the expected binary format marker or header."""


class CorruptionError(CozadError):
    """File has the right format marker but inconsistent or truncated contents."""


class ContractError(CozadError):
    """An operation was invoked with arguments that violate its contract."""


class ConfigError(CozadError):
    """Invalid, out-of-range, or unknown configuration value."""


class UndefinedMetricError(CozadError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
