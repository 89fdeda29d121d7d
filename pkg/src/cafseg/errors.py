"""Exception types shared across the package."""


class CafError(Exception):
    """Base class for all package errors."""


class DimensionError(CafError, ValueError):
    """Tensor shapes do not conform for an operation."""


class ContractError(CafError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ProtocolError(CafError, ValueError):
    """Incremental-learning protocol violated (bad scenario, labels, modes)."""


class FormatError(CafError, ValueError):
    """Malformed on-disk file (image, mask, index or checkpoint)."""
