"""Exception hierarchy shared by every stage of the pipeline."""


class AdunetError(Exception):
    """Base class for all package errors."""


class ConfigError(AdunetError, ValueError):
    """Invalid configuration or call arguments."""


class FormatError(AdunetError, ValueError):
    """A file on disk does not follow its declared binary/JSON layout."""


class StorageError(AdunetError, OSError):
    """Reading or writing an artifact failed."""


class MissingArtifactError(StorageError):
    """A stage needs an artifact (dataset, checkpoint, map) that does not exist."""


class GeometryError(AdunetError, ValueError):
    """Volumes that must share a voxel grid do not."""
