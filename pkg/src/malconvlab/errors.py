"""Exception hierarchy shared across the package."""


class MalconvLabError(Exception):
    """Base class for all errors raised by malconvlab."""


class ShapeError(MalconvLabError, ValueError):
    """An array does not have the shape an operation requires."""


class InvalidTokenError(MalconvLabError, ValueError):
    """A token value lies outside the model vocabulary."""


class EmptyDatasetError(MalconvLabError, ValueError):
    """A training split is empty or missing one of the two classes."""


class DivergenceError(MalconvLabError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class PEParseError(MalconvLabError, ValueError):
    """A byte string could not be parsed as a PE file.

    ``offset`` locates the offending byte position where that is meaningful.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (offset {offset:#x})"
        super().__init__(message)
        self.offset = offset


class NotAPEError(PEParseError):
    """Missing MZ or PE magic."""


class TruncatedFileError(PEParseError):
    """The file ends before a required header or table."""


class SectionBoundsError(PEParseError):
    """A section's raw data extends past the end of the file."""


class SectionOverlapError(PEParseError):
    """Section raw-data ranges overlap or are not sorted by file offset."""


class NotAttackableError(MalconvLabError):
    """The sample leaves no room for the requested modification."""


class NoDonorError(MalconvLabError):
    """No benign pool file satisfies the donor requirements."""


class NoSlackError(MalconvLabError):
    """The sample exposes no usable slack bytes."""


class EmptyCandidatesError(MalconvLabError):
    """Candidate selection produced no eligible samples."""


class IncompatibleModelsError(MalconvLabError):
    """Two models do not share the same architecture."""


class StoreError(MalconvLabError):
    """Base class for persistence-format errors."""


class ManifestError(StoreError):
    """A dataset manifest is malformed.

    ``line`` is the 1-based line number of the offending record.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class CheckpointError(StoreError):
    """Base class for checkpoint read errors."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint magic, version, or header geometry does not match."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint body length disagrees with its header."""
