"""Exception hierarchy shared by every odfkit module."""


class OdfError(Exception):
    """Base class for all odfkit errors."""


class DegenerateCloudError(OdfError, ValueError):
    """Raised when a cloud has no spatial extent or too few points."""


class ParseError(OdfError, ValueError):
    """A text or binary input could not be parsed.

    ``position`` is a 1-based line number for text formats and a 0-based
    byte offset for binary formats; ``kind`` says which.
    """

    def __init__(self, message, position=None, kind="line", path=None):
        self.position = position
        self.kind = kind
        self.path = path
        where = ""
        if position is not None:
            where = f"{kind} {position}: "
        if path is not None:
            where = f"{path}: {where}"
        super().__init__(f"{where}{message}")


class NonFiniteLossError(OdfError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, sample_ids=()):
        self.sample_ids = tuple(sample_ids)
        super().__init__(message)
