"""Exception types shared across the package.

The CLI maps ``ValidationError``/``FormatError`` to exit code 1 and
``OSError`` (including ``TruncatedFileError``) to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """A file could not be parsed; the message carries the line or byte offset."""


class DegenerateGeometryError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class EmptySetError(ValidationError):
    pass


class ExtractionError(RuntimeError):
    def __init__(self, msg: str, survivors: int = 0):
        super().__init__(msg)
        self.survivors = survivors


class TruncatedFileError(OSError):
    pass


class EmptyMeshError(ExtractionError):
    """No grid cell crosses the requested level."""
