"""Exception types shared across kv2ct.

Each class carries the process exit code the CLI maps it to.
"""


class Kv2CTError(Exception):
    exit_code = 1


class ConfigError(Kv2CTError, ValueError):
    exit_code = 2


class ShapeError(Kv2CTError, ValueError):
    exit_code = 2


class InvalidInputError(Kv2CTError, ValueError):
    exit_code = 2


class EmptyRegionError(Kv2CTError, ValueError):
    exit_code = 2


class UndefinedRateError(Kv2CTError, ValueError):
    exit_code = 3


class InsufficientVolumeError(Kv2CTError, ValueError):
    exit_code = 3


class NumericError(Kv2CTError, FloatingPointError):
    exit_code = 3


class StageError(Kv2CTError):
    """A pipeline stage failed; wraps the original error."""

    def __init__(self, stage, path, cause):
        self.stage = stage
        self.path = path
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4 if isinstance(cause, OSError) else 1)
        super().__init__(f"stage '{stage}' failed on {path}: {cause}")
