"""Exception types shared across the package.

Every error raised on bad input carries enough coordinates (row, column,
dimension, key) to locate the problem without a debugger.
"""


class MixedAEError(Exception):
    """Base class for all package errors."""


class ShapeError(MixedAEError):
    """Dimension mismatch between an input and what a layer or op expects."""

    def __init__(self, what: str, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class DataError(MixedAEError):
    """Malformed data file or in-memory table (bad value, bad row, bad label)."""


class ConfigError(MixedAEError):
    """Invalid, unknown or out-of-range configuration value."""


class GraphError(MixedAEError):
    """Misuse of the autodiff graph (non-scalar loss, detached node)."""


class TrainingDiverged(MixedAEError):
    """A component loss went non-finite during training."""

    def __init__(self, component: str, epoch: int, value: float):
        self.component = component
        self.epoch = epoch
        self.value = value
        super().__init__(
            f"loss component '{component}' became non-finite ({value}) at epoch {epoch}"
        )
