"""Exception types. Each carries the CLI exit code it maps to."""


class AmirError(Exception):
    exit_code = 1


class ConfigError(AmirError, ValueError):
    """Invalid configuration value or combination."""

    exit_code = 2


class DataError(AmirError):
    """Missing, unreadable or empty data."""

    exit_code = 3


class ShapeError(DataError, ValueError):
    """Array shape violates an operation's precondition."""


class NumericalError(AmirError, ArithmeticError):
    """Non-finite activations, losses or gradients."""

    exit_code = 4


class RoutingInvariantError(NumericalError):
    pass
