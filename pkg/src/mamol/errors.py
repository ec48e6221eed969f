"""Exception hierarchy shared across the package."""


class MamolError(Exception):
    """Base class for all package errors."""


class DimensionError(MamolError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(MamolError, ValueError):
    """A configuration value or argument is out of its valid range."""


class GraphError(MamolError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class LoaderError(MamolError):
    """Base class for on-disk dataset problems."""


class ManifestError(LoaderError):
    """Manifest missing, unparsable or missing required keys."""


class MissingFileError(LoaderError, FileNotFoundError):
    """A file named by the manifest does not exist."""


class HeaderError(LoaderError):
    """Binary header magic or version is wrong."""


class DataShapeError(LoaderError):
    """Binary payload disagrees with the manifest."""


class LabelRangeError(LoaderError):
    """A label lies outside [0, num_classes)."""


class CheckpointError(MamolError):
    """Checkpoint file is malformed."""


class TrainingError(MamolError, RuntimeError):
    """Optimization produced non-finite values."""
