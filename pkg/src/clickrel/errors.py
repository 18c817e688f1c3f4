"""Exception hierarchy.

Everything raised because of bad input data derives from :class:`DataError`;
the CLI maps that family to exit code 3.
"""

from __future__ import annotations


class DataError(Exception):
    """Input data violates a format or domain rule."""

    def __init__(self, message: str, *, line_no: int | None = None, source: str | None = None):
        self.message = message
        self.line_no = line_no
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if line_no is not None:
            where += f"{':' if where else 'line '}{line_no}"
        super().__init__(f"{where}: {message}" if where else message)

    def __reduce__(self):
        # keyword-only fields must survive pickling across worker processes
        return _rebuild, (type(self), self.message, self.line_no, self.source)


def _rebuild(cls, message, line_no, source):
    return cls(message, line_no=line_no, source=source)


class MalformedLine(DataError):
    pass


class FieldParse(DataError):
    pass


class InvariantViolation(DataError):
    pass


class EncodingViolation(DataError):
    pass


class GroupingViolation(DataError):
    pass


class NoRankOnClicked(DataError):
    pass


class PolicyUnresolved(DataError):
    pass


class PoolExhausted(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class DegenerateInput(DataError):
    pass


class ZeroVector(DataError):
    pass


class NonFinite(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class DivergenceDetected(DataError):
    pass


class CapacityExceeded(DataError):
    pass
