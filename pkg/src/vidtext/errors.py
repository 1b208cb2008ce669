"""Exception taxonomy shared across the package.

The CLI maps ConfigError and UsageError to exit code 2, everything else
to exit code 1.
"""


class VidtextError(Exception):
    """Base class for all package errors."""


class ShapeError(VidtextError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(VidtextError):
    """A precondition on an operation's arguments was violated."""


class ConfigError(VidtextError):
    """Invalid or inconsistent configuration."""


class TemporalCapacityError(VidtextError):
    """A clip has more frames than the trained temporal embedding table."""


class DegeneracyError(VidtextError):
    """A mathematically degenerate input (e.g. zero-norm vector to normalize)."""


class NonFiniteError(VidtextError):
    """An operation produced NaN or Inf."""


class GradientError(VidtextError):
    """A non-finite gradient was encountered during training."""


class CheckpointFormatError(VidtextError):
    """Checkpoint magic or version does not match."""


class CheckpointCorruptError(VidtextError):
    """Checkpoint file is truncated or internally inconsistent."""


class ManifestError(VidtextError):
    """Malformed manifest line or dangling clip reference."""
