"""Exception hierarchy shared by every MaskLab service."""


class MaskLabError(Exception):
    """Base class for all errors raised by MaskLab."""


class DimensionError(MaskLabError, ValueError):
    """Operand shapes do not fit together."""


class DomainError(MaskLabError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(MaskLabError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(MaskLabError, ValueError):
    """Invalid experiment or layer configuration.

    `key` names the offending configuration field when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class EvaluationError(MaskLabError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""
