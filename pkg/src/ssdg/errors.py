"""Exception types shared across the package."""


class SSDGError(Exception):
    pass


class DimensionError(SSDGError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SSDGError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(SSDGError, ArithmeticError):
    """A non-finite value appeared during computation."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(SSDGError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message, line=None, key=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key


class BatchSizeError(ContractError):
    pass


class UninitializedStatsError(ContractError):
    pass
