"""Exception types shared across the toolkit."""


class MitopatchError(Exception):
    """Base class for all toolkit errors."""


class StainEstimationError(MitopatchError):
    """Base class for failures of the stain-matrix estimation path."""


class InsufficientTissue(StainEstimationError):
    """Too few pixels survive the optical-density background filter."""


class DegenerateStains(StainEstimationError):
    """The two recovered stain directions are (near-)collinear."""


class MissingClass(MitopatchError):
    """An operation requiring both classes saw only one."""


class EmptyBatch(MitopatchError):
    """A loss or gradient was requested for an empty batch."""


class EmptyInput(MitopatchError):
    """A metric was requested for an empty sample list."""


class ShapeMismatch(MitopatchError):
    """Tensor shapes are inconsistent with the model configuration."""


class StaleCache(MitopatchError):
    """A backward pass received a cache that does not match its inputs."""


class ParseError(MitopatchError):
    """A manifest or config file failed validation.

    ``line`` is the 1-based line number when known, else None.
    """

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingFile(MitopatchError):
    """A referenced file does not exist."""


class DecodeError(MitopatchError):
    """An image file exists but could not be decoded."""


class UnsupportedFormat(MitopatchError):
    """An image file decodes to an unsupported format (alpha, 16-bit, non-PNG)."""


class IoError(MitopatchError):
    """A filesystem write failed."""


class CorruptCheckpoint(MitopatchError):
    """A checkpoint header/blob pair failed validation."""


class ConfigError(MitopatchError):
    """A run-config document is invalid (unknown key or bad value)."""


class UsageError(MitopatchError):
    """Bad command-line invocation."""
