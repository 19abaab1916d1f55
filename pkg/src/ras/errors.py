"""Exception taxonomy for the ras package."""


class RasError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RasError):
    """Operand dimensions are inconsistent with the operation's contract."""


class IndexSetError(RasError):
    """An index set is out of range, unsorted where order is required, or duplicated."""


class NonFiniteError(RasError):
    """A NaN or infinity appeared where only finite values are allowed."""


class StateError(RasError):
    """An operation was invoked against state that cannot support it (e.g. cold cache)."""


class ConfigError(RasError):
    """A run configuration failed validation before any work was performed."""


class TrainingDivergedError(RasError):
    """Training loss exceeded the divergence guard."""


class CheckpointError(RasError):
    """Base class for checkpoint serialization failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncationError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointShapeError(CheckpointError):
    """Tensor table entries are inconsistent (overlaps, size mismatches, bad dtype)."""
