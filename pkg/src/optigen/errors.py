"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data/format problems exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad values, inconsistent geometry."""


class DimensionError(ValueError):
    """Array shapes disagree with what an operation requires."""


class DataError(ValueError):
    """Base class for problems with on-disk artifacts."""


class FormatError(DataError):
    """A file does not follow its declared byte format."""


class TruncationError(DataError):
    """A file ended before its declared payload was complete."""


class IntegrityError(DataError):
    """A stored hash does not match the file contents."""


class VersionError(DataError):
    """An artifact declares a format version newer than this code supports."""


class NumericalError(RuntimeError):
    """Training or inference produced non-finite values."""


class TrainingError(NumericalError):
    """A training run aborted; parameters were restored to the last good state."""


class GraphStateError(RuntimeError):
    """Autodiff graph used out of order (e.g. backward without a fresh forward)."""


class GateError(RuntimeError):
    """An evaluation prerequisite (trained probe, accuracy gate) is not met."""
