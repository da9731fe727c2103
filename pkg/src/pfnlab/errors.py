"""Exception types shared across the package."""


class PfnError(Exception):
    """Base class for all package errors."""


class DimensionError(PfnError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(PfnError, ArithmeticError):
    """A non-finite value reached a layer boundary."""


class ContractError(PfnError, ValueError):
    """A documented precondition of an operation was violated."""


class CapacityError(ContractError):
    """Input exceeds the capacity of the model configuration."""


class ClassError(ContractError):
    """A class index is outside the supported range."""


class GenerationError(PfnError, RuntimeError):
    """A random generator could not produce a valid sample."""


class ConfigError(PfnError, ValueError):
    """A configuration is invalid or incomplete."""


class ParseError(PfnError, ValueError):
    """A data file is malformed."""


class CorruptionError(PfnError, IOError):
    """A binary file failed its integrity check."""


class NumericAbort(PfnError, RuntimeError):
    """Training produced a non-finite loss and was stopped."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
