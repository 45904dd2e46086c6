"""Exception hierarchy shared across the package."""


class CGDRCNError(Exception):
    pass


class ShapeError(CGDRCNError, ValueError):
    pass


class DomainError(CGDRCNError, ValueError):
    pass


class UsageError(CGDRCNError, ValueError):
    pass


class DatasetParseError(CGDRCNError):
    """Malformed dataset file. Carries the line/column of the failure when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ValidationError(CGDRCNError, ValueError):
    """One or more records violate dataset invariants.

    ``diagnostics`` is a list of ``(record_id, message)`` pairs.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = [f"{rid}: {msg}" for rid, msg in self.diagnostics]
        super().__init__("; ".join(lines))


class CapacityError(CGDRCNError):
    pass


class CheckpointCorruptError(CGDRCNError):
    pass


class CheckpointIncompatibleError(CGDRCNError):
    def __init__(self, field, expected, found):
        self.field = field
        super().__init__(f"checkpoint field {field!r} mismatch: expected {expected!r}, found {found!r}")


class DivergenceError(CGDRCNError):
    pass
