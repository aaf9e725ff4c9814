"""Exception types shared across the package."""


class LCNetError(Exception):
    """Base class for all errors raised by lcnet."""


class InvalidShapeError(LCNetError, ValueError):
    """A dims list is empty or contains an extent < 1."""


class ShapeMismatchError(LCNetError, ValueError):
    """Operands disagree on shape or channel count."""


class ConfigError(LCNetError, ValueError):
    """An architecture configuration is malformed."""


class CorruptFileError(LCNetError):
    """A weight or tensor file failed validation.

    ``offset`` is the byte position at which the fault was detected.
    """

    def __init__(self, message: str, offset: int, tensor: str | None = None):
        self.offset = offset
        self.tensor = tensor
        where = f" (tensor {tensor!r})" if tensor is not None else ""
        super().__init__(f"{message} at byte offset {offset}{where}")


class DegenerateBatchError(LCNetError, ValueError):
    """Batch statistics requested over fewer than two values per channel."""
