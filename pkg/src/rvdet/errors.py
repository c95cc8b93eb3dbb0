class InvalidInputError(ValueError):
    """Raised when an input violates an operation's precondition."""


class FormatError(InvalidInputError):
    """Raised when a file does not match the expected binary/text layout."""
