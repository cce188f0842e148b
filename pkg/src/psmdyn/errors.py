"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad or missing configuration input (files, lengths, schemas)."""


class ContractError(ValueError):
    """Caller violated an operation precondition (shapes, layouts, ranges)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or lost precision."""


class SimulationError(RuntimeError):
    """Forward simulation became ill-conditioned or otherwise failed."""
