"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, numerical 3, I/O 4).
"""


class BoldBasisError(Exception):
    """Base class for all package errors."""


class ConfigError(BoldBasisError):
    """Invalid configuration, arguments, or model settings."""


class NumericalError(BoldBasisError):
    """Numerical failure: singular systems, degenerate data, non-finite draws."""


class IOFormatError(BoldBasisError):
    """Malformed or inconsistent on-disk archives."""


class ValidationError(IOFormatError):
    """Loaded or constructed data violates a declared invariant (NaN, shape)."""


class StageError(BoldBasisError):
    """Wraps a pipeline-stage failure with the stage name attached."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
