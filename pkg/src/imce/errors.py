"""Exception hierarchy shared by all imce subsystems."""


class ImceError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ImceError):
    """A model or configuration file is structurally malformed."""


class ValidationError(ImceError):
    """A graph violates an IR invariant (names the offending node/tensor)."""


class CycleError(ValidationError):
    """The node dependency relation contains a cycle."""


class ShapeError(ImceError):
    """Tensor shapes are inconsistent with an operation's contract."""


class SizeError(ImceError):
    """A weight matrix exceeds the analog accelerator's dimension limits."""


class ScaleMismatchError(ImceError):
    """Operands that must share a quantization scale do not."""


class DegenerateRangeError(ImceError):
    """A tensor was identically zero over the whole calibration set."""


class QuantizationError(ImceError):
    """Quantization could not complete (bad calibration set, missing scale)."""


class CapacityError(ImceError):
    """Not enough board capacity for the nodes of one accelerator class."""

    def __init__(self, accel_class: str, needed: int, available: int):
        self.accel_class = accel_class
        self.needed = needed
        self.available = available
        self.shortfall = needed - available
        super().__init__(
            f"class '{accel_class}' needs {needed} F-thread slots but only "
            f"{available} are available (shortfall {self.shortfall})"
        )


class ConnectivityError(ImceError):
    """No considered assignment keeps every board within its S-thread cap."""


class ConfigError(ImceError):
    """A worker received a configuration it cannot honor."""


class DistributedError(ImceError):
    """A cluster-level failure during configuration or inference."""

    def __init__(self, message: str, board: str | None = None, seq: int | None = None):
        self.board = board
        self.seq = seq
        super().__init__(message)
