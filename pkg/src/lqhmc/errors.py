"""Exception hierarchy shared by all lqhmc modules."""


class LqhmcError(Exception):
    """Base class for every error raised by the package."""


class DomainError(LqhmcError, ValueError):
    """A density is non-zero where the target falls below the floor, or an
    argument lies outside its mathematical domain."""


class GridMismatchError(LqhmcError, ValueError):
    """Two grid functions live on different grids."""


class FlowDivergenceError(LqhmcError, FloatingPointError):
    """A phase-space flow produced non-finite coordinates."""


class SizeGuardError(LqhmcError, MemoryError):
    """Dense storage would exceed the configured node budget."""


class ConfigError(LqhmcError, ValueError):
    """An experiment configuration failed validation.

    ``line`` is the 1-based line in the config file the problem is anchored
    to, when known.
    """

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        if line is not None:
            where = f"{source}:{line}" if source else f"line {line}"
            message = f"{where}: {message}"
        super().__init__(message)
