"""Exception hierarchy. Each leaf maps to a distinct CLI exit code."""


class PointVeilError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(PointVeilError):
    exit_code = 2
    category = "config"


class InputError(PointVeilError):
    exit_code = 3
    category = "input"


class ParseError(InputError):
    exit_code = 4
    category = "parse"

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FormatError(PointVeilError):
    """Bad magic or structurally wrong file."""

    exit_code = 5
    category = "format"


class VersionError(FormatError):
    exit_code = 6
    category = "version"


class TruncatedError(FormatError):
    exit_code = 7
    category = "truncated"


class ChecksumError(FormatError):
    exit_code = 8
    category = "checksum"


class KeyValidationError(FormatError):
    exit_code = 9
    category = "key-validation"


class MismatchError(PointVeilError):
    """Model, key and ciphertext do not belong together."""

    exit_code = 10
    category = "mismatch"


class TrainingError(PointVeilError):
    exit_code = 11
    category = "training"


class TrainingDiverged(TrainingError):
    def __init__(self, message, checkpoint=None, trace=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace


class TapeError(PointVeilError):
    exit_code = 12
    category = "tape"


class MissingFileError(PointVeilError):
    exit_code = 13
    category = "missing-file"
