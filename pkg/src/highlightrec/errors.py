"""Exception hierarchy shared across the package.

The CLI maps :class:`DataError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class DataError(Exception):
    """Bad or inconsistent input data."""


class InvalidInputError(DataError, ValueError):
    pass


class MissingMetadataError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing metadata"


class MissingFeatureError(DataError, KeyError):
    def __init__(self, keys):
        self.keys = sorted(keys)
        shown = ", ".join(self.keys[:20])
        more = f" (+{len(self.keys) - 20} more)" if len(self.keys) > 20 else ""
        super().__init__(f"missing feature vectors for: {shown}{more}")

    def __str__(self) -> str:
        return self.args[0]


class NumericalError(FloatingPointError):
    """Training diverged (non-finite loss or gradient)."""

    def __init__(self, message: str, batch_index: int | None = None, last_good=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.last_good = last_good


class CheckpointMismatchError(DataError):
    pass
