"""Exception hierarchy shared by every module of the package."""


class KspaceRefineError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KspaceRefineError, ValueError):
    pass


class DimensionError(KspaceRefineError, ValueError):
    pass


class InfeasibleSpecError(KspaceRefineError, ValueError):
    pass


class InfeasibleRatioError(InfeasibleSpecError):
    """Lambda target count cannot hold every mandatory low-frequency row."""


class MaskViolationError(KspaceRefineError, ValueError):
    pass


class NumericError(KspaceRefineError, ArithmeticError):
    pass


class InvalidTapeError(KspaceRefineError, ValueError):
    pass


class FormatError(KspaceRefineError, ValueError):
    """Raised for malformed tensor, checkpoint or manifest files."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InternalError(KspaceRefineError, RuntimeError):
    pass


class ConfigError(KspaceRefineError, ValueError):
    pass
