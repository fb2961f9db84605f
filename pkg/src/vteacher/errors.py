"""Exception types shared across the package."""


class VTError(Exception):
    """Base class for all package errors."""


class MalformedDetection(VTError, ValueError):
    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class ShapeMismatch(VTError, ValueError):
    pass


class LayoutMismatch(VTError, ValueError):
    pass


class InvalidProfile(VTError, ValueError):
    pass


class StreamMismatch(VTError, ValueError):
    pass


class ParseError(VTError, ValueError):
    """Raised for unreadable files; carries the offending line and/or field."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class RangeError(VTError, ValueError):
    pass


class BoxOutsideGrid(UserWarning):
    """Emitted when boxes collapse to zero grid cells and are skipped."""
