"""Exception hierarchy shared by every subpackage."""


class SpikeBenchError(Exception):
    """Base class for all errors raised by spikebench."""


class DimensionError(SpikeBenchError, ValueError):
    """Incompatible tensor shapes."""


class NumericError(SpikeBenchError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(SpikeBenchError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(SpikeBenchError, ValueError):
    """A binary file does not match its expected layout."""


class StateError(SpikeBenchError, RuntimeError):
    """An operation was requested in a state that does not support it."""


class GraphError(StateError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class LengthError(FormatError):
    """A binary file is shorter (or longer) than its header declares."""
