"""Exception hierarchy.

Every error raised on purpose by the library derives from ``TreatNetError``.
Each family carries an ``exit_code`` used by the CLI (2 is left to argparse).
"""


class TreatNetError(Exception):
    exit_code = 1
    family = "error"


class ShapeError(TreatNetError, ValueError):
    exit_code = 4
    family = "shape"


class ConfigError(TreatNetError, ValueError):
    exit_code = 3
    family = "config"


class UnsupportedPatternError(ConfigError):
    """Graph rewrite found a layer pattern it cannot handle."""


class StaleCacheError(TreatNetError, RuntimeError):
    exit_code = 5
    family = "cache"


class DataError(TreatNetError, ValueError):
    exit_code = 6
    family = "data"


class ManifestError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PPMError(DataError):
    pass


class PPMMagicError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    def __init__(self, expected, actual):
        super().__init__(f"truncated pixel data: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ModelFormatError(TreatNetError, ValueError):
    exit_code = 7
    family = "format"


class BadMagicError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class UnknownSchemeError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class ControllerError(TreatNetError, ValueError):
    exit_code = 8
    family = "controller"


class TimestampOrderError(ControllerError):
    pass
