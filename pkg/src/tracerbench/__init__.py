"""Neural emulation of Eulerian atmospheric tracer transport with physical constraints."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigError, InvalidArgumentError, InvalidStateError, NumericalAbort, OutOfScopeError,
    TracerBenchError,
)
from .sphere import AtmosState, FluxField, Grid, HybridLevels  # noqa: E402

__all__ = [
    "AtmosState", "ConfigError", "FluxField", "Grid", "HybridLevels", "InvalidArgumentError",
    "InvalidStateError", "NumericalAbort", "OutOfScopeError", "TracerBenchError", "__version__",
]
