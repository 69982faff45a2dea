"""Exception hierarchy shared across the package."""


class MetaSurrogateError(Exception):
    """Base class for all package errors."""


class ConfigError(MetaSurrogateError):
    """Invalid configuration, incompatible shapes, or unusable settings."""


class DataError(MetaSurrogateError):
    """Dataset ingestion failure: missing files, bad checksums, corrupt content."""


class NumericError(MetaSurrogateError):
    """Non-finite values encountered where finite numerics are required."""


class CheckpointError(MetaSurrogateError):
    """Checkpoint archive missing, unreadable, or of an unsupported version."""
