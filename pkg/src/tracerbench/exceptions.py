"""Exception hierarchy shared by all tracerbench modules."""


class TracerBenchError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(TracerBenchError, ValueError):
    """An argument has the wrong shape, range or combination."""


class InvalidStateError(TracerBenchError, RuntimeError):
    """A physical or bookkeeping invariant does not hold."""


class NumericalAbort(InvalidStateError):
    """A rollout produced non-finite values or a non-positive tracer mass.

    ``step`` carries the index of the offending step when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConfigError(TracerBenchError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OutOfScopeError(ConfigError):
    """A configuration requests a component that is deliberately not built."""
