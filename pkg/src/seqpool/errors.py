"""Exception types shared across the package."""


class SeqpoolError(Exception):
    pass


class DimensionError(SeqpoolError, ValueError):
    """Operand shapes do not conform."""


class DomainError(SeqpoolError, ValueError):
    """Argument outside the valid domain of an operation."""


class FormatError(SeqpoolError, ValueError):
    """Malformed file, header or directory layout."""


class ConfigError(SeqpoolError, ValueError):
    """Invalid or contradictory training/run configuration."""


class DivergenceError(SeqpoolError, RuntimeError):
    """Training produced a non-finite loss."""
