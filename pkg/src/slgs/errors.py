"""Exception types raised across the package."""


class SlgsError(Exception):
    """Base class for all package errors."""


class ShapeError(SlgsError, ValueError):
    pass


class StateError(SlgsError, RuntimeError):
    pass


class InvalidPrimitive(SlgsError, ValueError):
    pass


class InvalidCamera(SlgsError, ValueError):
    pass


class MalformedFile(SlgsError, ValueError):
    pass


class UnsupportedCameraModel(SlgsError, ValueError):
    pass


class EmptyReconstruction(SlgsError, ValueError):
    pass


class NonFiniteGradient(SlgsError, FloatingPointError):
    def __init__(self, group: str, message: str = ""):
        self.group = group
        super().__init__(message or f"non-finite gradient in parameter group {group!r}")


class TrainingAborted(SlgsError, RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostics dict."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
