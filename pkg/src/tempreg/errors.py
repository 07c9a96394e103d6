"""Exception hierarchy shared by every module."""


class TempRegError(Exception):
    """Base class for all package errors."""


class DataError(TempRegError):
    """Bad input data: grid mismatch, malformed file, non-finite values."""


class GridMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    """Raised when NaN/Inf shows up where only finite values are admitted.

    During registration this usually means the step size is too large.
    """


class FormatError(DataError):
    """Malformed or truncated volume/field file."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class ConvergenceError(TempRegError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class RegistrationError(TempRegError):
    """A frame's registration failed; carries the (1-based) frame index."""

    def __init__(self, frame, cause):
        self.frame = frame
        self.cause = cause
        super().__init__(f"frame {frame}: {cause}")
