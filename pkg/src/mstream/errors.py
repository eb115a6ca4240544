"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """A binary or text artifact violates its on-disk format.

    ``offset`` is the byte position of the first violation when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""


class ScorerStateError(RuntimeError):
    """A prefix scorer was asked about a prefix outside its cache lineage."""
