"""Exception types shared across the package."""


class RfadError(Exception):
    """Base class for all package errors."""


class DimensionError(RfadError, ValueError):
    """Operand shapes do not conform."""


class DomainError(RfadError, ValueError):
    """Input outside an operation's mathematical domain."""


class NumericError(RfadError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class ContractError(RfadError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(RfadError, ValueError):
    """Malformed binary file (bad magic, version, or layout)."""


class IoError(RfadError, OSError):
    """I/O failure, including truncated payloads."""


class ValidationError(RfadError, ValueError):
    """Structurally readable data that violates a dataset invariant."""


class MetricError(RfadError, ValueError):
    """Metric undefined for the given inputs (e.g. single-class labels)."""


class ConfigError(RfadError, ValueError):
    """Unknown or ill-typed configuration key."""
