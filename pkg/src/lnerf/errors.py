class DomainError(ValueError):
    """An argument lies outside an operation's domain."""


class ParseError(ValueError):
    """Malformed input file or config text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TruncationError(ParseError):
    """File ended before the declared number of records was read."""


class FormatError(ValueError):
    """Corrupt or unsupported binary blob (checkpoints, images)."""
