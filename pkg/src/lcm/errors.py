"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent (dimension mismatch, bad extents)."""


class CountError(ValueError):
    """A requested count is out of range (N > L, k > M, K > N, ...)."""


class IndexRangeError(IndexError):
    """An index array references rows outside the source tensor."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


class DeterminismError(RuntimeError):
    """A map that must be deterministic produced two different values."""


class DegenerateRowError(ValueError):
    """A softmax row had no finite entry left after masking."""


class StabilityError(ArithmeticError):
    """A recurrence produced a non-finite hidden state."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(ValueError):
    """A run configuration failed to parse or validate."""


class FormatError(ValueError):
    """A checkpoint file is malformed, truncated, or mismatched."""


class DataError(ValueError):
    """A dataset record is invalid (e.g. label out of range)."""
