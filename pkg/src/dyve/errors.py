"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class DyveError(Exception):
    code = "error"


class ValidationError(DyveError, ValueError):
    code = "validation"


class ParseError(DyveError, ValueError):
    code = "parse_error"


class BoundsError(DyveError, IndexError):
    code = "bounds"


class ConfigError(DyveError, ValueError):
    code = "config"


class ModelFormatError(DyveError):
    code = "format"


class BadMagicError(ModelFormatError):
    code = "bad_magic"


class VersionMismatchError(ModelFormatError):
    code = "version_mismatch"


class TruncatedBlobError(ModelFormatError):
    code = "truncated_blob"


class ShapeInferenceError(ValidationError):
    code = "shape_mismatch"


class TrainingDivergedError(DyveError, RuntimeError):
    code = "diverged"

    def __init__(self, epoch: int, message: str = "") -> None:
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
