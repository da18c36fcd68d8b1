"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: usage errors exit 1,
data/validation errors 2, training divergence 3, I/O failures 4.
"""


class FragPredictError(Exception):
    """Base class for all package errors."""


class DimensionError(FragPredictError):
    """Image or mask dimensions are invalid or inconsistent."""


class DegenerateInputError(FragPredictError):
    """Input lacks the structure an operation requires (e.g. too few tones)."""


class SegmentationError(FragPredictError):
    """No usable foreground region could be segmented."""


class EmptyRegionError(FragPredictError):
    """A measurement was requested over an empty pixel set."""


class ConfigError(FragPredictError):
    """A configuration value violates its invariants."""


class ShapeError(FragPredictError):
    """A tensor shape does not match what a layer expects."""


class StateError(FragPredictError):
    """An operation was called in the wrong state (e.g. unfitted, no graph)."""


class TrainingDataError(FragPredictError):
    """The training split cannot support learning (e.g. single class)."""


class TrainingDivergedError(FragPredictError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"loss diverged (non-finite) at epoch {epoch}")


class ManifestError(FragPredictError):
    """A dataset manifest fails schema or vocabulary validation."""


class MissingFilesError(ManifestError):
    """Manifest references files that do not exist; lists every missing path."""

    def __init__(self, paths: list[str]):
        self.paths = list(paths)
        listing = "\n  ".join(self.paths)
        super().__init__(f"{len(self.paths)} referenced file(s) missing:\n  {listing}")


class SplitError(FragPredictError):
    """A dataset split cannot be formed (e.g. single patient)."""


class UndefinedRocError(FragPredictError):
    """ROC/AUC is undefined because only one class is present."""


class EmptyInputError(FragPredictError):
    """A metric was requested over empty label/prediction sequences."""


class WeightFormatError(FragPredictError):
    """A weight file is malformed or has an unsupported version."""
