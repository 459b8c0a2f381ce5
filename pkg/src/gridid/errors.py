"""Exception types shared across the package."""


class GridIdError(Exception):
    """Base class for all package errors."""


class StructureError(GridIdError):
    """A grid or matrix violates a structural requirement (connectivity, indexing...)."""


class NumericalError(GridIdError):
    """A numerical operation failed (singular system, non-convergence...)."""


class ConfigError(GridIdError):
    """Invalid user-supplied configuration or file format."""


class UnsupportedPriorError(GridIdError):
    """A solver received a prior it cannot handle."""
