"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, rasters, configs)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FloatingPointError):
    """A computation produced non-finite values."""


class EmptyMaskWarning(UserWarning):
    """A masked reduction was asked to average over zero pixels."""
