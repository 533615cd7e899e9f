"""Exception types shared across the package.

The CLI maps them to exit codes: configuration 2, data 3, numerical 4.
"""


class ContractError(ValueError):
    """An operation's preconditions were violated."""


class ConfigError(ValueError):
    """Inconsistent configuration (shapes, strategy/adapter pairing, ...)."""


class DataError(RuntimeError):
    """Missing, unreadable or infeasible data."""


class NumericalError(FloatingPointError):
    """Non-finite loss, gradient or plan."""
