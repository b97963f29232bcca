"""Exception types shared across the library."""


class KbnetError(Exception):
    """Base class for all library errors."""


class ShapeError(KbnetError):
    """Tensor shapes are inconsistent with the requested operation."""


class ConfigError(KbnetError):
    """A configuration value violates a build-time invariant."""


class CheckpointError(KbnetError):
    """Base class for checkpoint I/O failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class ChecksumError(CheckpointError):
    """Checkpoint payload checksum does not validate."""


class ImageFormatError(KbnetError):
    """An image file is malformed or uses an unsupported encoding."""
