"""Exception types raised across the package."""


class VidClipError(Exception):
    """Base class for all package errors."""


class ConfigError(VidClipError, ValueError):
    pass


class ShapeError(VidClipError, ValueError):
    pass


class DataError(VidClipError, ValueError):
    pass


class EmptyClassSet(ConfigError):
    pass


class TokenOverflow(VidClipError, ValueError):
    pass


class UnknownToken(VidClipError, KeyError):
    pass


class VocabError(VidClipError, ValueError):
    """Target class names use words the checkpoint tokenizer never saw."""


class ZeroNorm(VidClipError, ValueError):
    pass


class InvalidTemperature(VidClipError, ValueError):
    pass


class InvalidMode(VidClipError, ValueError):
    pass


class EmptyVideo(VidClipError, ValueError):
    pass


class EmptyViews(VidClipError, ValueError):
    pass


class DuplicateParameter(VidClipError, KeyError):
    pass


class IntegrityError(VidClipError):
    """A file's stored digest does not match its contents."""


class TrainingDiverged(VidClipError, FloatingPointError):
    """Raised when the loss becomes non-finite; carries a parameter snapshot."""

    def __init__(self, message, step=None, snapshot=None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot
