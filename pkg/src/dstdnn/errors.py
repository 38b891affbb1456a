"""Exception types shared across the package."""


class DSTDNNError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DSTDNNError, ValueError):
    pass


class ShapeError(DSTDNNError, ValueError):
    pass


class NumericError(DSTDNNError, ArithmeticError):
    """Raised on non-finite values or degenerate numeric conditions."""


class ConfigError(DSTDNNError, ValueError):
    pass


class ContractError(DSTDNNError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class CheckpointError(DSTDNNError, IOError):
    pass
