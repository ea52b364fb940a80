"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class RacdnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RacdnnError):
    """Invalid or mismatched tensor shapes."""


class ArgumentError(RacdnnError):
    """An argument violates an operation's contract."""


class GraphError(RacdnnError):
    """Backward requested on a tensor with no recorded computation graph."""


class ScaleError(RacdnnError):
    """Attention scale parameter is not strictly positive."""


class BatchError(RacdnnError):
    """Batch too small for the requested normalization mode."""


class GroundtruthError(RacdnnError):
    """Groundtruth mask is not strictly binary."""


class SpecError(RacdnnError):
    """Degenerate dataset specification."""


class ParseError(RacdnnError):
    """Malformed file content. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(RacdnnError):
    """Checkpoint file is malformed, or its version/shapes do not match."""


class NumericError(RacdnnError):
    """A NaN or Inf turned up where only finite values are allowed."""
