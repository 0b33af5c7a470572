"""Exception types raised across the package."""


class NerfStagesError(Exception):
    """Base class for all package errors."""


class DegenerateFrame(NerfStagesError, ValueError):
    pass


class OutOfBounds(NerfStagesError, IndexError):
    pass


class InvalidBounds(NerfStagesError, ValueError):
    pass


class ShapeMismatch(NerfStagesError, ValueError):
    pass


class NonFiniteInput(NerfStagesError, ValueError):
    pass


class MaskLengthMismatch(NerfStagesError, ValueError):
    pass


class CacheMismatch(NerfStagesError, ValueError):
    pass


class TooFewSamples(NerfStagesError, ValueError):
    pass


class ShrinkNotSupported(NerfStagesError, ValueError):
    pass


class CheckpointCorrupt(NerfStagesError, IOError):
    pass


class SchemaError(NerfStagesError, ValueError):
    """Manifest or config does not match the expected schema.

    ``key_path`` names the offending entry, e.g. ``frames[3].transform_matrix``.
    """

    def __init__(self, message: str, key_path: str = ""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class MissingFile(NerfStagesError, FileNotFoundError):
    pass


class ImageDecodeError(NerfStagesError, IOError):
    pass


class NotEnoughFrames(NerfStagesError, ValueError):
    pass


class ImageTooSmall(NerfStagesError, ValueError):
    pass
